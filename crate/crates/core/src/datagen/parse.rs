use serde::{Deserialize, Serialize};

pub const CORRECT_PREFIX: &str = "Correct answer:";
pub const INCORRECT_PREFIX: &str = "Incorrect answer:";

/// Why a generated response was filtered out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    #[error("missing-line")]
    MissingLine,
    #[error("bad-prefix")]
    BadPrefix,
    #[error("empty-payload")]
    EmptyPayload,
    #[error("identical-payloads")]
    IdenticalPayloads,
    #[error("trailing-text")]
    TrailingText,
}

fn payload<'a>(line: &'a str, prefix: &str) -> Result<&'a str, RejectReason> {
    let rest = line.strip_prefix(prefix).ok_or(RejectReason::BadPrefix)?;
    if !rest.is_empty() && !rest.starts_with(' ') {
        return Err(RejectReason::BadPrefix);
    }
    let p = rest.trim();
    if p.is_empty() {
        return Err(RejectReason::EmptyPayload);
    }
    Ok(p)
}

/// Strict parse of a two-line response into `(correct, incorrect)`.
///
/// The first two non-empty lines must carry the correct and incorrect
/// prefixes in that order; anything after them rejects.
pub fn parse_response(raw: &str) -> Result<(String, String), RejectReason> {
    let mut lines = raw.split('\n').filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or(RejectReason::MissingLine)?;
    let correct = payload(first.trim_end(), CORRECT_PREFIX)?;
    let second = lines.next().ok_or(RejectReason::MissingLine)?;
    let incorrect = payload(second.trim_end(), INCORRECT_PREFIX)?;
    if lines.next().is_some() {
        return Err(RejectReason::TrailingText);
    }
    if correct == incorrect {
        return Err(RejectReason::IdenticalPayloads);
    }
    Ok((correct.to_string(), incorrect.to_string()))
}
