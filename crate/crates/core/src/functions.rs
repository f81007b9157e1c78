//! Built-in fusion function implementations.
//!
//! Real fusion mathematics is out of scope; these are deterministic
//! arithmetic stand-ins. An implementation maps the input tuple and the
//! latched parameters to one value per output port, or fails with a
//! message that the engine records as an intra-EF error.

use std::collections::BTreeMap;

use crate::process::ImplId;
use crate::value::Value;

/// An implementation of a fusion function. Receives one value per input
/// port plus the latched parameters, and must return exactly one value per
/// output port of the node it runs in.
pub type FusionFn = fn(&[Value], &BTreeMap<String, Value>) -> Result<Vec<Value>, String>;

/// Registry of available implementations, keyed by implementation id.
#[derive(Clone)]
pub struct FunctionRegistry {
    fns: BTreeMap<ImplId, FusionFn>,
}

impl FunctionRegistry {
    /// The registry of built-in implementations.
    pub fn builtin() -> Self {
        let mut fns: BTreeMap<ImplId, FusionFn> = BTreeMap::new();
        fns.insert(ImplId::new("identity"), identity);
        fns.insert(ImplId::new("camera"), identity);
        fns.insert(ImplId::new("sum"), sum);
        fns.insert(ImplId::new("product"), product);
        fns.insert(ImplId::new("scale"), scale);
        fns.insert(ImplId::new("constant"), constant);
        fns.insert(ImplId::new("filter"), filter);
        fns.insert(ImplId::new("filter-alt"), filter_alt);
        fns.insert(ImplId::new("display"), display);
        fns.insert(ImplId::new("overflow"), overflow);
        Self { fns }
    }

    pub fn get(&self, id: &ImplId) -> Option<&FusionFn> {
        self.fns.get(id)
    }

    pub fn contains(&self, id: &ImplId) -> bool {
        self.fns.contains_key(id)
    }

    pub fn register(&mut self, id: ImplId, f: FusionFn) {
        self.fns.insert(id, f);
    }
}

/// Passes each input through unchanged; arity must match.
fn identity(inputs: &[Value], _params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    Ok(inputs.to_vec())
}

fn ints(inputs: &[Value]) -> Result<Vec<i64>, String> {
    inputs
        .iter()
        .map(|v| v.as_int().ok_or_else(|| format!("non-integer input {v}")))
        .collect()
}

/// Checked integer sum of all inputs; one output.
fn sum(inputs: &[Value], _params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    let mut total: i64 = 0;
    for v in ints(inputs)? {
        total = total
            .checked_add(v)
            .ok_or_else(|| "arithmetic overflow".to_owned())?;
    }
    Ok(vec![Value::Int(total)])
}

/// Checked integer product of all inputs; one output.
fn product(inputs: &[Value], _params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    let mut total: i64 = 1;
    for v in ints(inputs)? {
        total = total
            .checked_mul(v)
            .ok_or_else(|| "arithmetic overflow".to_owned())?;
    }
    Ok(vec![Value::Int(total)])
}

/// Multiplies the single input by the integer parameter `factor`.
fn scale(inputs: &[Value], params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    let [input] = inputs else {
        return Err(format!("scale expects 1 input, got {}", inputs.len()));
    };
    let factor = params
        .get("factor")
        .and_then(Value::as_int)
        .ok_or_else(|| "missing integer parameter 'factor'".to_owned())?;
    let v = input
        .as_int()
        .ok_or_else(|| format!("non-integer input {input}"))?;
    let scaled = v
        .checked_mul(factor)
        .ok_or_else(|| "arithmetic overflow".to_owned())?;
    Ok(vec![Value::Int(scaled)])
}

/// Emits the parameter `value` regardless of inputs; one output.
fn constant(_inputs: &[Value], params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    let value = params
        .get("value")
        .cloned()
        .ok_or_else(|| "missing parameter 'value'".to_owned())?;
    Ok(vec![value])
}

/// Tags the single input with the current `filter` parameter.
fn filter(inputs: &[Value], params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    let [input] = inputs else {
        return Err(format!("filter expects 1 input, got {}", inputs.len()));
    };
    let name = params
        .get("filter")
        .map(|v| v.to_string())
        .unwrap_or_else(|| "none".to_owned());
    Ok(vec![Value::Text(format!("{name}({input})"))])
}

/// Alternate filter implementation with the same semantics but a
/// distinguishable output tag; exists so implementation swaps have a
/// second valid choice.
fn filter_alt(inputs: &[Value], params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    let [input] = inputs else {
        return Err(format!("filter expects 1 input, got {}", inputs.len()));
    };
    let name = params
        .get("filter")
        .map(|v| v.to_string())
        .unwrap_or_else(|| "none".to_owned());
    Ok(vec![Value::Text(format!("{name}*({input})"))])
}

/// Terminal consumer: accepts anything, produces nothing.
fn display(_inputs: &[Value], _params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    Ok(vec![])
}

/// Fault stand-in: always fails with an arithmetic overflow.
fn overflow(_inputs: &[Value], _params: &BTreeMap<String, Value>) -> Result<Vec<Value>, String> {
    i64::MAX
        .checked_add(1)
        .ok_or_else(|| "arithmetic overflow".to_owned())?;
    unreachable!("checked_add(i64::MAX, 1) always overflows")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_adds_integers() {
        let out = sum(&[Value::Int(2), Value::Int(3)], &BTreeMap::new()).unwrap();
        assert_eq!(out, vec![Value::Int(5)]);
    }

    #[test]
    fn identity_passes_payload_through() {
        let out = identity(&[Value::Int(7)], &BTreeMap::new()).unwrap();
        assert_eq!(out, vec![Value::Int(7)]);
    }

    #[test]
    fn overflow_always_fails() {
        let err = overflow(&[Value::Int(1)], &BTreeMap::new()).unwrap_err();
        assert_eq!(err, "arithmetic overflow");
    }

    #[test]
    fn filter_uses_latched_parameter() {
        let mut params = BTreeMap::new();
        params.insert("filter".to_owned(), Value::Text("blur".into()));
        let out = filter(&[Value::Int(4)], &params).unwrap();
        assert_eq!(out, vec![Value::Text("blur(4)".into())]);
    }
}
