//! Structured-output parsing for generator replies.
//!
//! Every numeric reply is requested as a fenced block of `key: value` lines.
//! `strict_*` functions accept only that format (and valid ranges);
//! `repair_*` functions pull numbers out of free text keyed by id and clamp
//! them, and are used only after a strict reprompt has also failed.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;

pub type ParseResult<T> = Result<T, String>;

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(-?\d+(?:\.\d+)?(?:[eE]-?\d+)?)\s*(%?)").unwrap());
static KV_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*([A-Za-z0-9_\-]+)\s*:\s*(-?\d+(?:\.\d+)?(?:[eE]-?\d+)?)\s*$").unwrap());

/// Lines inside the first fenced block, if any.
pub fn fenced_lines(text: &str) -> Option<Vec<&str>> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // skip an optional info string on the fence line
    let body_start = after.find('\n').map(|i| i + 1)?;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

fn parse_number(text: &str) -> Option<f64> {
    let caps = NUMBER.captures(text)?;
    let v: f64 = caps[1].parse().ok()?;
    Some(if &caps[2] == "%" { v / 100.0 } else { v })
}

fn kv_pairs(lines: &[&str]) -> ParseResult<Vec<(String, f64)>> {
    lines
        .iter()
        .map(|l| {
            let caps = KV_LINE.captures(l).ok_or_else(|| format!("line `{l}` is not `id: number`"))?;
            let v: f64 = caps[2].parse().map_err(|e| format!("{e}"))?;
            Ok((caps[1].to_string(), v))
        })
        .collect()
}

/// Disease weights: every candidate and `other` must be present, values
/// finite and non-negative. Extra ids are returned as given.
pub fn strict_weights(text: &str, candidates: &[String]) -> ParseResult<(Vec<(String, f64)>, f64)> {
    let lines = fenced_lines(text).ok_or("no fenced block")?;
    let pairs = kv_pairs(&lines)?;
    let mut seen = HashSet::new();
    let mut other = None;
    let mut weights = Vec::new();
    for (id, v) in pairs {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("weight for `{id}` is {v}"));
        }
        if !seen.insert(id.clone()) {
            return Err(format!("duplicate id `{id}`"));
        }
        if id == "other" {
            other = Some(v);
        } else {
            weights.push((id, v));
        }
    }
    if let Some(missing) = candidates.iter().find(|c| !seen.contains(*c)) {
        return Err(format!("missing candidate `{missing}`"));
    }
    Ok((weights, other.ok_or("missing `other`")?))
}

/// Finds `id ... number` anywhere in the text for each candidate. Missing
/// candidates get weight 0; negative values are clamped to 0.
pub fn repair_weights(text: &str, candidates: &[String]) -> ParseResult<(Vec<(String, f64)>, f64)> {
    let mut found_any = false;
    let lower = text.to_lowercase();
    let find = |key: &str| -> Option<f64> {
        let pattern =
            format!(r"(?m){}[^\n\d\-]{{0,40}}(-?\d+(?:\.\d+)?\s*%?)", regex::escape(&key.to_lowercase()));
        let re = Regex::new(&pattern).ok()?;
        let caps = re.captures(&lower)?;
        parse_number(&caps[1])
    };
    let mut weights = Vec::with_capacity(candidates.len());
    for c in candidates {
        let alt = c.replace('_', " ");
        let v = find(c).or_else(|| find(&alt));
        found_any |= v.is_some();
        weights.push((c.clone(), v.unwrap_or(0.0).max(0.0)));
    }
    if !found_any {
        return Err("no candidate weights found".into());
    }
    let other = find("other").unwrap_or(0.0).max(0.0);
    Ok((weights, other))
}

/// Batched likelihoods `r1..rL`, each in [0, 1].
pub fn strict_likelihoods(text: &str, n: usize) -> ParseResult<Vec<f64>> {
    let lines = fenced_lines(text).ok_or("no fenced block")?;
    let pairs = kv_pairs(&lines)?;
    let mut out = vec![None; n];
    for (key, v) in pairs {
        let idx: usize =
            key.trim_start_matches(['r', 'R']).parse().map_err(|_| format!("bad response key `{key}`"))?;
        if idx == 0 || idx > n {
            return Err(format!("response index {idx} out of range"));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("likelihood {v} outside [0, 1]"));
        }
        out[idx - 1] = Some(v);
    }
    out.into_iter().enumerate().map(|(i, v)| v.ok_or_else(|| format!("missing r{}", i + 1))).collect()
}

/// Per-index search, falling back to the first `n` numbers in order.
pub fn repair_likelihoods(text: &str, n: usize) -> ParseResult<Vec<f64>> {
    let keyed: Vec<Option<f64>> = (1..=n)
        .map(|i| {
            let re = Regex::new(&format!(r"(?mi)\br?{i}\s*[:=)\.]\s*(-?\d+(?:\.\d+)?\s*%?)")).ok()?;
            re.captures(text).and_then(|c| parse_number(&c[1]))
        })
        .collect();
    let values: Vec<f64> = if keyed.iter().all(Option::is_some) {
        keyed.into_iter().flatten().collect()
    } else {
        let all: Vec<f64> = NUMBER.captures_iter(text).filter_map(|c| parse_number(&c[0])).collect();
        if all.len() < n {
            return Err(format!("found {} numbers, need {n}", all.len()));
        }
        all.into_iter().take(n).collect()
    };
    Ok(values.into_iter().map(clamp_unit).collect())
}

/// Single likelihood: a fenced `p: number` line or a bare number.
pub fn strict_likelihood(text: &str) -> ParseResult<f64> {
    let v = match fenced_lines(text) {
        Some(lines) => {
            let pairs = kv_pairs(&lines)?;
            match pairs.as_slice() {
                [(k, v)] if k == "p" => *v,
                _ => return Err("expected a single `p: number` line".into()),
            }
        }
        None => text.trim().parse::<f64>().map_err(|_| "not a bare number".to_string())?,
    };
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("likelihood {v} outside [0, 1]"));
    }
    Ok(v)
}

pub fn repair_likelihood(text: &str) -> ParseResult<f64> {
    parse_number(text).map(clamp_unit).ok_or_else(|| "no number found".into())
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

fn bullet_body(line: &str) -> Option<&str> {
    let l = line.trim();
    let l = l.strip_prefix("- ").or_else(|| l.strip_prefix("* ")).or_else(|| {
        let digits = l.find(|c: char| !c.is_ascii_digit())?;
        if digits == 0 {
            return None;
        }
        l[digits..].strip_prefix(". ").or_else(|| l[digits..].strip_prefix(") "))
    })?;
    let l = l.trim();
    (!l.is_empty()).then_some(l)
}

fn dedup_keep_order(items: Vec<(String, String)>) -> Vec<(String, String)> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|(text, _)| seen.insert(text.to_lowercase())).collect()
}

/// Questions as `- text || rationale` lines. Duplicates are dropped.
pub fn strict_questions(text: &str) -> ParseResult<Vec<(String, String)>> {
    let lines = fenced_lines(text).ok_or("no fenced block")?;
    let mut out = Vec::new();
    for l in lines {
        let body = bullet_body(l).ok_or_else(|| format!("line `{l}` is not a bullet"))?;
        let (q, why) = body.split_once("||").unwrap_or((body, ""));
        let q = q.trim();
        if q.is_empty() {
            return Err("empty question".into());
        }
        out.push((q.to_string(), why.trim().to_string()));
    }
    if out.is_empty() {
        return Err("no questions".into());
    }
    Ok(dedup_keep_order(out))
}

/// Any line ending in a question mark.
pub fn repair_questions(text: &str) -> ParseResult<Vec<(String, String)>> {
    let out: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| {
            let body = bullet_body(l).unwrap_or(l.trim());
            let (q, why) = body.split_once("||").unwrap_or((body, ""));
            let q = q.trim().trim_matches('"');
            q.ends_with('?').then(|| (q.to_string(), why.trim().to_string()))
        })
        .collect();
    if out.is_empty() {
        return Err("no questions found".into());
    }
    Ok(dedup_keep_order(out))
}

/// Responses as `- answer` lines, deduplicated.
pub fn strict_responses(text: &str) -> ParseResult<Vec<String>> {
    let lines = fenced_lines(text).ok_or("no fenced block")?;
    let mut out = Vec::new();
    for l in lines {
        let body = bullet_body(l).ok_or_else(|| format!("line `{l}` is not a bullet"))?;
        out.push((body.trim_matches('"').to_string(), String::new()));
    }
    Ok(dedup_keep_order(out).into_iter().map(|(r, _)| r).collect())
}

pub fn repair_responses(text: &str) -> ParseResult<Vec<String>> {
    let mut out: Vec<(String, String)> = text
        .lines()
        .filter_map(bullet_body)
        .map(|b| (b.trim_matches('"').to_string(), String::new()))
        .collect();
    if out.is_empty() {
        static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""([^"\n]+)""#).unwrap());
        out = QUOTED.captures_iter(text).map(|c| (c[1].trim().to_string(), String::new())).collect();
    }
    let out: Vec<String> = dedup_keep_order(out).into_iter().map(|(r, _)| r).collect();
    if out.is_empty() {
        return Err("no responses found".into());
    }
    Ok(out)
}

/// Free-text replies: trimmed, surrounding quotes removed, non-empty.
pub fn plain_text(text: &str) -> ParseResult<String> {
    let t = text.trim();
    let t = t.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(t).trim();
    if t.is_empty() {
        Err("empty reply".into())
    } else {
        Ok(t.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn strict_weights_accepts_block() {
        let text = "Here you go:\n```\na: 0.5\nb: 0.25\nother: 0.25\n```\n";
        let (w, o) = strict_weights(text, &ids(&["a", "b"])).unwrap();
        assert_eq!(w, vec![("a".into(), 0.5), ("b".into(), 0.25)]);
        assert_eq!(o, 0.25);
    }

    #[test]
    fn strict_weights_rejects_missing_and_negative() {
        assert!(strict_weights("```\na: 0.5\nother: 0.5\n```", &ids(&["a", "b"])).is_err());
        assert!(strict_weights("```\na: -0.5\nother: 0.5\n```", &ids(&["a"])).is_err());
        assert!(strict_weights("a: 0.5, other 0.5", &ids(&["a"])).is_err());
    }

    #[test]
    fn repair_weights_finds_numbers_by_id() {
        let text = "I think Orthostatic Hypotension is about 22%, cervical_spondylosis = 0.19 and other conditions 0.59";
        let (w, o) =
            repair_weights(text, &ids(&["orthostatic_hypotension", "cervical_spondylosis", "vertigo"]))
                .unwrap();
        assert!((w[0].1 - 0.22).abs() < 1e-12);
        assert_eq!(w[1].1, 0.19);
        assert_eq!(w[2].1, 0.0);
        assert_eq!(o, 0.59);
        assert!(repair_weights("nothing useful", &ids(&["a"])).is_err());
    }

    #[test]
    fn likelihood_batches() {
        assert_eq!(strict_likelihoods("```\nr1: 0.4\nr2: 0.1\n```", 2).unwrap(), vec![0.4, 0.1]);
        assert!(strict_likelihoods("```\nr1: 1.3\nr2: 0.1\n```", 2).is_err());
        assert!(strict_likelihoods("```\nr1: 0.3\n```", 2).is_err());
        assert_eq!(repair_likelihoods("r1: 1.3, r2 = 0.1", 2).unwrap(), vec![1.0, 0.1]);
        assert_eq!(repair_likelihoods("probably 0.7 then 0.2", 2).unwrap(), vec![0.7, 0.2]);
    }

    #[test]
    fn single_likelihood() {
        assert_eq!(strict_likelihood("```\np: 0.4\n```").unwrap(), 0.4);
        assert_eq!(strict_likelihood(" 0.1 ").unwrap(), 0.1);
        assert!(strict_likelihood("1.3").is_err());
        assert_eq!(repair_likelihood("1.3").unwrap(), 1.0);
        assert_eq!(repair_likelihood("about 40%").unwrap(), 0.4);
    }

    #[test]
    fn questions_and_responses() {
        let q = strict_questions(
            "```\n- Does it spin? || vertigo vs OH\n- Does it spin? || dup\n- Neck pain?\n```",
        )
        .unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].1, "vertigo vs OH");
        let r = strict_responses("```\n- Yes\n- No\n- yes\n```").unwrap();
        assert_eq!(r, vec!["Yes", "No"]);
        let q = repair_questions("Sure! 1. Do you sneeze?\nAlso: Any fever?").unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(repair_responses(r#"They might say "Yes" or "No""#).unwrap(), vec!["Yes", "No"]);
    }

    #[test]
    fn plain_text_trims_quotes() {
        assert_eq!(plain_text(" \"runny nose\" \n").unwrap(), "runny nose");
        assert!(plain_text("  ").is_err());
    }
}
