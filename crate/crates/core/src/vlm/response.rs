use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::layout::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Valid,
    InvalidFormat,
    OutOfRangeClamped,
}

impl ResponseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseStatus::Valid => "valid",
            ResponseStatus::InvalidFormat => "invalid_format",
            ResponseStatus::OutOfRangeClamped => "out_of_range_clamped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorResponse {
    pub raw: String,
    pub parsed: Option<BBox>,
    pub status: ResponseStatus,
}

impl PredictorResponse {
    pub fn invalid(raw: impl Into<String>) -> Self {
        Self { raw: raw.into(), parsed: None, status: ResponseStatus::InvalidFormat }
    }
}

const KEYS: [&str; 4] = ["left", "top", "width", "height"];

/// Every JSON object that starts somewhere in `raw`, outermost first.
fn objects(raw: &str) -> impl Iterator<Item = Map<String, Value>> + '_ {
    raw.char_indices().filter(|&(_, c)| c == '{').filter_map(move |(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts the first JSON object that has all four box keys, ignoring any
/// surrounding prose or code fences.
pub fn parse_response(raw: &str) -> PredictorResponse {
    let Some(obj) = objects(raw).find(|m| KEYS.iter().all(|k| m.contains_key(*k))) else {
        return PredictorResponse::invalid(raw);
    };
    let mut vals = [0.0; 4];
    for (slot, key) in vals.iter_mut().zip(KEYS) {
        match obj[key].as_f64() {
            Some(v) if v.is_finite() => *slot = v,
            _ => return PredictorResponse::invalid(raw),
        }
    }
    let clamped = vals.map(|v| v.clamp(0.0, 1.0));
    let status = if clamped == vals { ResponseStatus::Valid } else { ResponseStatus::OutOfRangeClamped };
    PredictorResponse { raw: raw.to_string(), parsed: Some(BBox::from_array(clamped)), status }
}

/// The reply a well-behaved predictor would give for `b`.
pub fn canonical_bbox_json(b: &BBox) -> String {
    serde_json::json!({ "left": b.left, "top": b.top, "width": b.width, "height": b.height }).to_string()
}

/// Counts per status; `merge` is associative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidTally {
    pub valid: usize,
    pub invalid_format: usize,
    pub out_of_range_clamped: usize,
}

impl InvalidTally {
    pub fn add(&mut self, status: ResponseStatus) {
        match status {
            ResponseStatus::Valid => self.valid += 1,
            ResponseStatus::InvalidFormat => self.invalid_format += 1,
            ResponseStatus::OutOfRangeClamped => self.out_of_range_clamped += 1,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            valid: self.valid + other.valid,
            invalid_format: self.invalid_format + other.invalid_format,
            out_of_range_clamped: self.out_of_range_clamped + other.out_of_range_clamped,
        }
    }

    /// Responses that enter metric means.
    pub fn usable(&self) -> usize {
        self.valid + self.out_of_range_clamped
    }
}

pub fn tally_invalid<'a>(statuses: impl IntoIterator<Item = &'a ResponseStatus>) -> InvalidTally {
    let mut t = InvalidTally::default();
    for s in statuses {
        t.add(*s);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_object_is_valid() {
        let r = parse_response(r#"{"left":0.1,"top":0.2,"width":0.3,"height":0.4}"#);
        assert_eq!(r.status, ResponseStatus::Valid);
        assert_eq!(r.parsed, Some(BBox::new(0.1, 0.2, 0.3, 0.4)));
    }

    #[test]
    fn fenced_out_of_range_is_clamped() {
        let r = parse_response("here you go: ```json {\"left\":1.2,\"top\":0,\"width\":0.5,\"height\":0.5}``` ");
        assert_eq!(r.status, ResponseStatus::OutOfRangeClamped);
        assert_eq!(r.parsed, Some(BBox::new(1.0, 0.0, 0.5, 0.5)));
    }

    #[test]
    fn non_numeric_is_invalid() {
        for raw in [r#"{"left":"abc"}"#, r#"{"left":"a","top":0,"width":0,"height":0}"#, "no json", "{", ""] {
            let r = parse_response(raw);
            assert_eq!(r.status, ResponseStatus::InvalidFormat, "{raw}");
            assert_eq!(r.parsed, None);
        }
    }

    #[test]
    fn nested_and_repeated_objects() {
        let r = parse_response(r#"{"note":"x","box":{"left":0.5,"top":0.5,"width":0.1,"height":0.1}} {"left":0.9}"#);
        assert_eq!(r.parsed, Some(BBox::new(0.5, 0.5, 0.1, 0.1)));
        let r = parse_response(r#"{"left":0.2,"top":0.2,"width":0.1,"height":0.1} {"left":0.3,"top":0.3,"width":0.1,"height":0.1}"#);
        assert_eq!(r.parsed, Some(BBox::new(0.2, 0.2, 0.1, 0.1)));
    }

    #[test]
    fn canonical_rendering_round_trips() {
        let b = BBox::new(0.1, 1.0 / 3.0, 0.123456789012345, 1e-7);
        assert_eq!(parse_response(&canonical_bbox_json(&b)).parsed, Some(b));
    }

    #[test]
    fn tallies() {
        use ResponseStatus::*;
        assert_eq!(tally_invalid(&[Valid, InvalidFormat, Valid]), InvalidTally { valid: 2, invalid_format: 1, out_of_range_clamped: 0 });
        assert_eq!(tally_invalid(&[]), InvalidTally::default());
        assert_eq!(tally_invalid(&[OutOfRangeClamped; 10]).out_of_range_clamped, 10);
    }
}
