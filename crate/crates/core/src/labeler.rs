//! Percentile labeling of scored samples and prompt augmentation.
//!
//! Every sample is scored by all `M` utilities, each score is converted to a
//! percentile over the whole dataset, and the prompt is suffixed with a
//! conditioning token naming the utility with the highest percentile.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::ensemble::UtilityEnsemble;
use crate::error::{Error, Result};
use crate::reward_stats::{select_max_index, NormalizationParams, PercentileTable, RunningBounds};

pub const DEFAULT_TOKEN: &str = "<max_utility_idx>";
const PROMPT_PREFIX: &str = "### Prompt: ";

/// `0 -> 'a'`, `1 -> 'b'`, ... up to `25 -> 'z'`.
pub fn index_to_letter(i: usize) -> Result<char> {
    if i > 25 {
        return Err(Error::UnsupportedIndex(i));
    }
    Ok((b'a' + i as u8) as char)
}

pub fn letter_to_index(c: char) -> Result<usize> {
    if c.is_ascii_lowercase() {
        Ok((c as u8 - b'a') as usize)
    } else {
        Err(Error::Validation(format!("'{c}' is not an index letter")))
    }
}

/// `"### Prompt: {x} {token} {letter}"`.
pub fn augment_prompt(x: &str, i: usize, token: &str) -> Result<String> {
    if token.is_empty() {
        return Err(Error::Validation("conditioning token must be non-empty".into()));
    }
    let letter = index_to_letter(i)?;
    Ok(format!("{PROMPT_PREFIX}{x} {token} {letter}"))
}

/// Recovers the utility index from an augmented prompt's suffix.
pub fn parse_augmented_index(prompt: &str, token: &str) -> Result<usize> {
    let bad = || Error::Validation(format!("prompt does not end with '{token} <letter>'"));
    let rest = prompt.strip_suffix(|c: char| c.is_ascii_lowercase()).ok_or_else(bad)?;
    let letter = prompt.chars().last().ok_or_else(bad)?;
    rest.strip_suffix(' ')
        .and_then(|r| r.strip_suffix(token))
        .and_then(|r| r.strip_suffix(' '))
        .ok_or_else(bad)?;
    letter_to_index(letter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub prompt_id: String,
    pub prompt: String,
    pub response: String,
    pub rewards: Vec<f64>,
    /// Simulator style that produced the response, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    #[serde(flatten)]
    pub raw: RawSample,
    pub normalized_rewards: Vec<f64>,
    pub utilities: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub chosen_index: usize,
    pub augmented_prompt: String,
}

/// Strict utility values of every sample (`[sample][utility]`) after normalization.
pub fn score_rewards(
    rewards: &[&[f64]],
    ensemble: &UtilityEnsemble,
    norm: &NormalizationParams,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    rewards
        .iter()
        .map(|z| {
            if z.len() != ensemble.k() {
                return Err(Error::shape("sample rewards", ensemble.k(), z.len()));
            }
            let nz = norm.normalize(z)?;
            let u = ensemble.evaluate(&nz)?;
            Ok((nz, u))
        })
        .collect()
}

/// Labels a dataset: percentiles are taken over the dataset itself, so
/// `N` equals the number of samples and each query is one of the references.
pub fn label_dataset(
    samples: &[RawSample],
    ensemble: &UtilityEnsemble,
    bounds: &RunningBounds,
    token: &str,
) -> Result<(Vec<LabeledSample>, PercentileTable)> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("cannot label an empty dataset"));
    }
    if bounds.k() != ensemble.k() {
        return Err(Error::shape("bounds dimension", ensemble.k(), bounds.k()));
    }
    let norm = bounds.normalization()?;
    let rewards: Vec<&[f64]> = samples.iter().map(|s| s.rewards.as_slice()).collect();
    let scored = score_rewards(&rewards, ensemble, &norm)?;
    let utilities: Vec<Vec<f64>> = scored.iter().map(|(_, u)| u.clone()).collect();
    let table = PercentileTable::from_sample_utilities(&utilities)?;

    let labeled = samples
        .iter()
        .zip(scored)
        .map(|(s, (normalized_rewards, utilities))| {
            let percentiles = table.percentiles(&utilities)?;
            let chosen_index = select_max_index(&percentiles)?;
            Ok(LabeledSample {
                augmented_prompt: augment_prompt(&s.prompt, chosen_index, token)?,
                raw: s.clone(),
                normalized_rewards,
                utilities,
                percentiles,
                chosen_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labeled, table))
}

/// Count of samples per chosen index (length `m`).
pub fn label_histogram(labeled: &[LabeledSample], m: usize) -> Vec<usize> {
    let mut hist = vec![0; m];
    for s in labeled {
        if let Some(slot) = hist.get_mut(s.chosen_index) {
            *slot += 1;
        }
    }
    hist
}

/// Reads input JSONL, checking every record has `k` finite rewards.
/// Blank lines are skipped; errors carry the 1-based line number.
pub fn read_raw_jsonl<R: BufRead>(reader: R, k: usize) -> Result<Vec<RawSample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RawSample = serde_json::from_str(&line).map_err(|e| {
            Error::Parse {
                location: format!("column {}", e.column()),
                message: e.to_string(),
            }
            .at_line(lineno)
        })?;
        if sample.rewards.len() != k {
            return Err(Error::shape("record rewards", k, sample.rewards.len()).at_line(lineno));
        }
        if sample.rewards.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite reward".into()).at_line(lineno));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monotone_net::MonotoneNet;

    fn raw(id: &str, rewards: Vec<f64>) -> RawSample {
        RawSample {
            prompt_id: id.into(),
            prompt: format!("prompt {id}"),
            response: "r".into(),
            rewards,
            style: None,
        }
    }

    #[test]
    fn letters() {
        assert_eq!(index_to_letter(2).unwrap(), 'c');
        assert_eq!(index_to_letter(8).unwrap(), 'i');
        assert_eq!(index_to_letter(0).unwrap(), 'a');
        assert_eq!(index_to_letter(25).unwrap(), 'z');
        assert!(matches!(index_to_letter(26), Err(Error::UnsupportedIndex(26))));
    }

    #[test]
    fn augment_examples() {
        assert_eq!(
            augment_prompt("hi", 2, DEFAULT_TOKEN).unwrap(),
            "### Prompt: hi <max_utility_idx> c"
        );
        assert_eq!(augment_prompt("", 0, "<t>").unwrap(), "### Prompt:  <t> a");
        assert!(augment_prompt("hi", 0, "").is_err());
        assert!(augment_prompt("hi", 30, "<t>").is_err());
    }

    #[test]
    fn suffix_parse_inverts_augment() {
        for i in 0..26 {
            let p = augment_prompt("some prompt", i, DEFAULT_TOKEN).unwrap();
            assert_eq!(parse_augmented_index(&p, DEFAULT_TOKEN).unwrap(), i);
        }
        assert!(parse_augmented_index("### Prompt: hi c", DEFAULT_TOKEN).is_err());
        assert!(parse_augmented_index("### Prompt: hi <max_utility_idx> C", DEFAULT_TOKEN).is_err());
    }

    fn axis_ensemble() -> UtilityEnsemble {
        // utility 0 watches objective 0, utility 1 watches objective 1
        UtilityEnsemble::from_nets(
            vec![
                MonotoneNet::linear(vec![1.0, 0.0]).unwrap(),
                MonotoneNet::linear(vec![0.0, 1.0]).unwrap(),
            ],
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn single_sample_labels_index_zero() {
        let e = axis_ensemble();
        let samples = vec![raw("a", vec![1.0, 2.0])];
        let bounds = RunningBounds {
            z_min: vec![0.0, 0.0],
            z_max: vec![3.0, 3.0],
        };
        let (labeled, table) = label_dataset(&samples, &e, &bounds, DEFAULT_TOKEN).unwrap();
        assert_eq!(table.n_samples(), 1);
        assert_eq!(labeled[0].percentiles, vec![1.0, 1.0]);
        assert_eq!(labeled[0].chosen_index, 0);
        assert!(labeled[0].augmented_prompt.ends_with("<max_utility_idx> a"));
    }

    #[test]
    fn label_matches_brute_force_percentiles() {
        let e = axis_ensemble();
        let samples = vec![
            raw("a", vec![0.1, 0.9]),
            raw("b", vec![0.8, 0.2]),
            raw("c", vec![0.5, 0.5]),
        ];
        let bounds =
            RunningBounds::from_samples(samples.iter().map(|s| s.rewards.as_slice())).unwrap();
        let (labeled, _) = label_dataset(&samples, &e, &bounds, DEFAULT_TOKEN).unwrap();
        // brute force: percentile = count of dataset scores <= own score / N
        for s in &labeled {
            let mut pct = Vec::new();
            for i in 0..2 {
                let own = s.utilities[i];
                let count = labeled.iter().filter(|o| o.utilities[i] <= own).count();
                pct.push(count as f64 / labeled.len() as f64);
            }
            assert_eq!(s.percentiles, pct);
        }
        assert_eq!(labeled[0].chosen_index, 1);
        assert_eq!(labeled[1].chosen_index, 0);
    }

    #[test]
    fn label_rejects_bad_input() {
        let e = axis_ensemble();
        let bounds = RunningBounds {
            z_min: vec![0.0, 0.0],
            z_max: vec![1.0, 1.0],
        };
        assert!(matches!(label_dataset(&[], &e, &bounds, DEFAULT_TOKEN), Err(Error::EmptyBatch(_))));
        let bad = vec![raw("a", vec![0.1])];
        assert!(matches!(
            label_dataset(&bad, &e, &bounds, DEFAULT_TOKEN),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn jsonl_read_reports_line_numbers() {
        let text = "{\"prompt_id\":\"1\",\"prompt\":\"p\",\"response\":\"r\",\"rewards\":[1.0,2.0]}\n\
                    {\"prompt_id\":\"2\",\"prompt\":\"p\",\"response\":\"r\",\"rewards\":[1.0]}\n";
        let err = read_raw_jsonl(text.as_bytes(), 2).unwrap_err();
        match err {
            Error::AtLine { line, source } => {
                assert_eq!(line, 2);
                assert!(matches!(*source, Error::Shape { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = read_raw_jsonl("not json\n".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, Error::AtLine { line: 1, .. }));
    }

    #[test]
    fn labeled_json_field_names() {
        let e = axis_ensemble();
        let samples = vec![raw("a", vec![0.1, 0.9]), raw("b", vec![0.9, 0.1])];
        let bounds =
            RunningBounds::from_samples(samples.iter().map(|s| s.rewards.as_slice())).unwrap();
        let (labeled, _) = label_dataset(&samples, &e, &bounds, DEFAULT_TOKEN).unwrap();
        let v: serde_json::Value = serde_json::to_value(&labeled[0]).unwrap();
        for key in [
            "prompt_id",
            "prompt",
            "response",
            "rewards",
            "normalized_rewards",
            "utilities",
            "percentiles",
            "chosen_index",
            "augmented_prompt",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v.get("style").is_none());
    }
}
