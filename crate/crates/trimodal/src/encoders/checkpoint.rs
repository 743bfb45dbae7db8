//! Plain-text model checkpoints with bit-exact round trips.
//!
//! Layout (one logical item per line, parameters in sorted name order):
//!
//! ```text
//! trimodal-model v1
//! gru_convention zr-convex-update-v1
//! seed 42
//! d 8
//! d_h 6
//! v 16
//! word_dim 5
//! normalize_joint false
//! vocab 3
//! <unk>
//! cat
//! dog
//! param gru.b_h vector 6
//! 0 0 0 0 0 0
//! param gru.u_h matrix 6 6
//! <6 rows of 6 numbers>
//! ...
//! end
//! ```
//!
//! Numbers use Rust's shortest round-trip `f64` formatting, so a save/load
//! cycle reproduces every parameter bit for bit. Gradients are transient and
//! never serialized.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{
    EmbeddingModel, ModelDims, Vocabulary, GRU_CONVENTION, PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, RealMatrix, RealVector, Tensor};

const MAGIC: &str = "trimodal-model v1";

/// Expected tensor layout for a canonical parameter name.
/// `None` cols means vector.
fn expected_shape(name: &str, dims: &ModelDims, vocab_len: usize) -> (usize, Option<usize>) {
    match name {
        "w_image" => (dims.d, Some(dims.v)),
        "w_sentence" => (dims.d, Some(dims.d_h)),
        "w_tag" => (dims.d, Some(dims.word_dim)),
        "gru.w_z" | "gru.w_r" | "gru.w_h" => (dims.d_h, Some(dims.word_dim)),
        "gru.u_z" | "gru.u_r" | "gru.u_h" => (dims.d_h, Some(dims.d_h)),
        "gru.b_z" | "gru.b_r" | "gru.b_h" => (dims.d_h, None),
        "word_table" => (vocab_len, Some(dims.word_dim)),
        other => panic!("no canonical shape for parameter '{other}'"),
    }
}

fn push_numbers(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").expect("writing to String cannot fail");
    }
    out.push('\n');
}

pub(crate) fn model_to_string(model: &EmbeddingModel) -> Result<String> {
    for token in model.vocab.rows() {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "vocabulary token '{token}' cannot be serialized (empty or contains whitespace)"
            )));
        }
    }
    for name in PARAM_NAMES {
        for &x in model.params.value(name).as_slice() {
            if !x.is_finite() {
                return Err(Error::Numeric(format!(
                    "parameter '{name}' contains a non-finite value"
                )));
            }
        }
    }

    let mut out = String::new();
    let d = &model.dims;
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "gru_convention {GRU_CONVENTION}").unwrap();
    writeln!(out, "seed {}", model.seed).unwrap();
    writeln!(out, "d {}", d.d).unwrap();
    writeln!(out, "d_h {}", d.d_h).unwrap();
    writeln!(out, "v {}", d.v).unwrap();
    writeln!(out, "word_dim {}", d.word_dim).unwrap();
    writeln!(out, "normalize_joint {}", model.normalize_joint).unwrap();
    writeln!(out, "vocab {}", model.vocab.len()).unwrap();
    for token in model.vocab.rows() {
        writeln!(out, "{token}").unwrap();
    }
    for name in PARAM_NAMES {
        match model.params.value(name) {
            Tensor::Matrix(m) => {
                writeln!(out, "param {name} matrix {} {}", m.rows(), m.cols()).unwrap();
                for r in 0..m.rows() {
                    push_numbers(&mut out, m.row(r));
                }
            }
            Tensor::Vector(v) => {
                writeln!(out, "param {name} vector {}", v.dim()).unwrap();
                push_numbers(&mut out, v.as_slice());
            }
        }
    }
    writeln!(out, "end").unwrap();
    Ok(out)
}

/// Writes a model checkpoint. The file is rewritten atomically enough for
/// this crate's purposes: a temp-free single write.
pub fn save_model(model: &EmbeddingModel, path: &Path) -> Result<()> {
    let text = model_to_string(model)?;
    fs::write(path, text)?;
    Ok(())
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: String,
    last_line: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str, path: &str) -> Self {
        Reader {
            lines: text.lines().enumerate(),
            path: path.to_string(),
            last_line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            line: Some(self.last_line),
            msg: msg.into(),
        }
    }

    fn next_line(&mut self, what: &str) -> Result<&'a str> {
        match self.lines.next() {
            Some((idx, line)) => {
                self.last_line = idx + 1;
                Ok(line)
            }
            None => Err(Error::Format {
                path: self.path.clone(),
                line: None,
                msg: format!("file ended early, expected {what}"),
            }),
        }
    }

    fn expect_exact(&mut self, expected: &str, what: &str) -> Result<()> {
        let line = self.next_line(what)?;
        if line != expected {
            return Err(self.err(format!("expected '{expected}', found '{line}'")));
        }
        Ok(())
    }

    /// Parses a `key value` line with a fixed key.
    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line(&format!("'{key} <value>'"))?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected '{key} <value>', found '{line}'")))?;
        rest.parse::<T>()
            .map_err(|_| self.err(format!("cannot parse '{rest}' as value of '{key}'")))
    }

    fn numbers(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let line = self.next_line(what)?;
        let mut out = Vec::with_capacity(count);
        for piece in line.split(' ') {
            let x: f64 = piece
                .parse()
                .map_err(|_| self.err(format!("cannot parse number '{piece}'")))?;
            if !x.is_finite() {
                return Err(self.err(format!("non-finite value '{piece}'")));
            }
            out.push(x);
        }
        if out.len() != count {
            return Err(self.err(format!(
                "expected {count} numbers for {what}, found {}",
                out.len()
            )));
        }
        Ok(out)
    }
}

pub(crate) fn model_from_str(text: &str, path_label: &str) -> Result<EmbeddingModel> {
    let mut r = Reader::new(text, path_label);
    r.expect_exact(MAGIC, "header")?;

    let convention: String = r.keyed("gru_convention")?;
    if convention != GRU_CONVENTION {
        return Err(r.err(format!(
            "unsupported gru convention '{convention}', this build implements '{GRU_CONVENTION}'"
        )));
    }
    let seed: u64 = r.keyed("seed")?;
    let dims = ModelDims {
        d: r.keyed("d")?,
        d_h: r.keyed("d_h")?,
        v: r.keyed("v")?,
        word_dim: r.keyed("word_dim")?,
    };
    dims.validate()?;
    let normalize_joint: bool = r.keyed("normalize_joint")?;

    let vocab_len: usize = r.keyed("vocab")?;
    if vocab_len == 0 {
        return Err(r.err("vocabulary must contain at least the unknown token"));
    }
    let mut rows = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        rows.push(r.next_line("vocabulary token")?.to_string());
    }
    let vocab = Vocabulary::from_rows(rows)?;

    let mut params = ParameterSet::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for _ in 0..PARAM_NAMES.len() {
        let header = r.next_line("'param <name> <kind> <shape>'")?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.first() != Some(&"param") {
            return Err(r.err(format!("expected a param block, found '{header}'")));
        }
        let name = *fields
            .get(1)
            .ok_or_else(|| r.err("param line missing a name"))?;
        if !PARAM_NAMES.contains(&name) {
            return Err(r.err(format!("unknown parameter name '{name}'")));
        }
        if !seen.insert(name.to_string()) {
            return Err(r.err(format!("parameter '{name}' appears twice")));
        }
        let (want_rows, want_cols) = expected_shape(name, &dims, vocab_len);
        let tensor = match (fields.get(2).copied(), fields.len()) {
            (Some("matrix"), 5) => {
                let rows: usize = fields[3]
                    .parse()
                    .map_err(|_| r.err(format!("bad row count '{}'", fields[3])))?;
                let cols: usize = fields[4]
                    .parse()
                    .map_err(|_| r.err(format!("bad col count '{}'", fields[4])))?;
                let want_cols = want_cols.ok_or_else(|| {
                    r.err(format!("parameter '{name}' must be a vector, not a matrix"))
                })?;
                if rows != want_rows || cols != want_cols {
                    return Err(r.err(format!(
                        "parameter '{name}' has shape {rows}x{cols}, expected {want_rows}x{want_cols}"
                    )));
                }
                let mut values = Vec::with_capacity(rows * cols);
                for row_idx in 0..rows {
                    values.extend(r.numbers(cols, &format!("row {row_idx} of '{name}'"))?);
                }
                Tensor::Matrix(RealMatrix::new(rows, cols, values)?)
            }
            (Some("vector"), 4) => {
                if want_cols.is_some() {
                    return Err(r.err(format!(
                        "parameter '{name}' must be a matrix, not a vector"
                    )));
                }
                let len: usize = fields[3]
                    .parse()
                    .map_err(|_| r.err(format!("bad length '{}'", fields[3])))?;
                if len != want_rows {
                    return Err(r.err(format!(
                        "parameter '{name}' has length {len}, expected {want_rows}"
                    )));
                }
                Tensor::Vector(RealVector::new(r.numbers(len, &format!("'{name}'"))?))
            }
            _ => return Err(r.err(format!("malformed param header '{header}'"))),
        };
        params.register(name, tensor)?;
    }

    r.expect_exact("end", "'end' terminator")?;
    if let Some((idx, line)) = r.lines.next() {
        return Err(Error::Format {
            path: r.path,
            line: Some(idx + 1),
            msg: format!("unexpected content after 'end': '{line}'"),
        });
    }

    Ok(EmbeddingModel {
        dims,
        vocab,
        normalize_joint,
        seed,
        params,
    })
}

/// Reads a model checkpoint written by [`save_model`], validating the header,
/// the GRU convention tag, every shape, and finiteness of every value.
pub fn load_model(path: &Path) -> Result<EmbeddingModel> {
    let text = fs::read_to_string(path)?;
    model_from_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_model() -> EmbeddingModel {
        let vocab = Vocabulary::build(["dog", "cat", "runs"]);
        let mut init = BTreeMap::new();
        init.insert("cat".to_string(), RealVector::new(vec![0.1, -0.25, 1e-17]));
        let mut model = EmbeddingModel::with_word_init(
            ModelDims { d: 3, d_h: 2, v: 4, word_dim: 3 },
            vocab,
            99,
            &init,
        )
        .unwrap();
        model.normalize_joint = true;
        // Exercise awkward but finite values.
        model.params.grad_matrix_mut("w_image").as_mut_slice()[0] = 5.0;
        model.params.value_mut("w_image").as_mut_slice()[1] = -0.0;
        model.params.value_mut("w_image").as_mut_slice()[2] = f64::MIN_POSITIVE;
        model
    }

    fn bits(model: &EmbeddingModel) -> Vec<(String, Vec<u64>)> {
        PARAM_NAMES
            .iter()
            .map(|name| {
                (
                    name.to_string(),
                    model
                        .params
                        .value(name)
                        .as_slice()
                        .iter()
                        .map(|x| x.to_bits())
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let text = model_to_string(&model).unwrap();
        let back = model_from_str(&text, "mem").unwrap();
        assert_eq!(bits(&model), bits(&back), "every parameter bit must survive");
        assert_eq!(back.dims, model.dims);
        assert_eq!(back.vocab, model.vocab);
        assert_eq!(back.seed, 99);
        assert!(back.normalize_joint);
        for name in PARAM_NAMES {
            assert!(
                back.params.grad(name).as_slice().iter().all(|&x| x == 0.0),
                "gradients are transient and must load as zero"
            );
        }
    }

    #[test]
    fn reserialization_is_byte_identical() {
        let model = sample_model();
        let text = model_to_string(&model).unwrap();
        let again = model_to_string(&model_from_str(&text, "mem").unwrap()).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn file_round_trip_via_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(bits(&model), bits(&back));
    }

    #[test]
    fn loader_rejects_wrong_magic() {
        let text = model_to_string(&sample_model()).unwrap();
        let bad = text.replacen("trimodal-model v1", "trimodal-model v9", 1);
        let err = model_from_str(&bad, "mem").unwrap_err();
        assert!(matches!(err, Error::Format { line: Some(1), .. }), "got {err}");
    }

    #[test]
    fn loader_rejects_unknown_gru_convention() {
        let text = model_to_string(&sample_model()).unwrap();
        let bad = text.replacen(GRU_CONVENTION, "other-convention", 1);
        assert!(matches!(
            model_from_str(&bad, "mem"),
            Err(Error::Format { line: Some(2), .. })
        ));
    }

    #[test]
    fn loader_rejects_truncation_and_trailing_content() {
        let text = model_to_string(&sample_model()).unwrap();
        let no_end = text.trim_end_matches("end\n").to_string();
        assert!(matches!(
            model_from_str(&no_end, "mem"),
            Err(Error::Format { .. })
        ));

        let trailing = format!("{text}junk\n");
        let err = model_from_str(&trailing, "mem").unwrap_err();
        match err {
            Error::Format { msg, .. } => assert!(msg.contains("after 'end'"), "{msg}"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn loader_rejects_non_finite_values() {
        let model = sample_model();
        let text = model_to_string(&model).unwrap();
        // Replace the first number of w_image's first row with NaN. The param
        // blocks are sorted, so w_image follows the nine gru.* blocks.
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let header_idx = lines
            .iter()
            .position(|l| l.starts_with("param w_image"))
            .unwrap();
        let mut pieces: Vec<String> = lines[header_idx + 1]
            .split(' ')
            .map(str::to_string)
            .collect();
        pieces[0] = "NaN".to_string();
        lines[header_idx + 1] = pieces.join(" ");
        let bad = format!("{}\n", lines.join("\n"));
        let err = model_from_str(&bad, "mem").unwrap_err();
        match err {
            Error::Format { msg, line, .. } => {
                assert!(msg.contains("non-finite"), "{msg}");
                assert_eq!(line, Some(header_idx + 2));
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn loader_rejects_shape_mismatch() {
        let text = model_to_string(&sample_model()).unwrap();
        let bad = text.replacen("param w_image matrix 3 4", "param w_image matrix 4 3", 1);
        let err = model_from_str(&bad, "mem").unwrap_err();
        match err {
            Error::Format { msg, .. } => assert!(msg.contains("expected 3x4"), "{msg}"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn loader_rejects_missing_vocab_sentinel() {
        let text = model_to_string(&sample_model()).unwrap();
        let bad = text.replacen("<unk>\n", "oops\n", 1);
        assert!(matches!(
            model_from_str(&bad, "mem"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn saving_non_finite_parameters_fails() {
        let mut model = sample_model();
        model.params.value_mut("w_tag").as_mut_slice()[0] = f64::INFINITY;
        assert!(matches!(
            model_to_string(&model),
            Err(Error::Numeric(_))
        ));
    }
}
