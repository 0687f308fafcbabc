use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::binning::BinLabel;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no decimal rating found in model output {snippet:?}")]
pub struct ParseError {
    pub snippet: String,
}

fn decimal_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+\.\d+").expect("valid regex"))
}

/// Extracts the first decimal number in `text` as a bin label.
///
/// Whole decimal tokens are matched, so `12.5` is read as 12.5 (and clamped
/// to 9.9) rather than as `2.5`. Values are rounded to one decimal and
/// clamped to `[0.0, 9.9]`.
pub fn parse_bin_answer(text: &str) -> Result<BinLabel, ParseError> {
    let token = decimal_token().find(text).ok_or_else(|| ParseError { snippet: text.chars().take(80).collect() })?;
    let value: f64 = token.as_str().parse().map_err(|_| ParseError { snippet: token.as_str().to_string() })?;
    Ok(BinLabel::nearest(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(parse_bin_answer("7.3").unwrap().value(), 7.3);
        assert_eq!(parse_bin_answer("Step 3: therefore the answer is 4.2 (high confidence).").unwrap().value(), 4.2);
        assert!(parse_bin_answer("cannot determine").is_err());
        assert!(parse_bin_answer("around 7").is_err());
    }

    #[test]
    fn first_match_wins_and_clamps() {
        assert_eq!(parse_bin_answer("5.5, maybe 6.1").unwrap().value(), 5.5);
        assert_eq!(parse_bin_answer("12.5").unwrap().value(), 9.9);
        assert_eq!(parse_bin_answer("-1.0").unwrap().value(), 0.0);
        assert_eq!(parse_bin_answer("rating: 3.04").unwrap().value(), 3.0);
    }

    proptest! {
        #[test]
        fn always_valid_label(s in ".*") {
            if let Ok(label) = parse_bin_answer(&s) {
                prop_assert!(label.index() < 100);
            }
        }

        #[test]
        fn bare_labels_round_trip(i in 0usize..100) {
            let label = BinLabel::from_index(i).unwrap();
            prop_assert_eq!(parse_bin_answer(&format!("Answer: {label}")).unwrap(), label);
        }
    }
}
