//! Perplexity sweeps across sequence lengths, bias-matrix dumps, throughput
//! benchmarks and the gradient audit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{grad_check, GradCheckOptions, Scalar, Tape, Tensor};
use crate::posenc::PosEncKind;

/// Largest sequence `dump_bias` accepts by default.
pub const DUMP_CAP: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub sequence_length: usize,
    /// `None` when the length could not be evaluated.
    pub perplexity: Option<f64>,
    pub tokens_evaluated: usize,
    pub windows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Batched forward and backward at the training length.
    TrainBatched,
    /// Token-by-token decode with the streaming caches.
    InferUnbatched,
    /// Token-by-token decode re-running the full forward each step.
    InferRecompute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub mode: BenchMode,
    pub sequence_length: usize,
    pub tokens_per_second: f64,
    pub peak_bytes: u64,
    pub repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: String,
    pub encoding: String,
    pub rows: Vec<PplRow>,
    pub throughput: Vec<ThroughputRow>,
    pub timestamp: String,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn perplexity_at(&self, length: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.sequence_length == length).and_then(|r| r.perplexity)
    }

    /// The report with its timestamp cleared, for reproducibility comparisons.
    pub fn without_timestamp(&self) -> Self {
        Self { timestamp: String::new(), ..self.clone() }
    }
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// The length grid `{T/2, T, 2T, 4T, 8T}` around a training length.
pub fn doubling_lengths(t_train: usize) -> Vec<usize> {
    vec![t_train / 2, t_train, 2 * t_train, 4 * t_train, 8 * t_train]
}

/// Mean next-token NLL over non-overlapping windows of `length` inputs.
///
/// Window `k` reads `tokens[k·L ..= (k+1)·L]`. Returns `(mean_nll, windows)`.
pub fn window_nll<T: Scalar>(model: &Model<T>, tokens: &[usize], length: usize) -> Result<(f64, usize)> {
    if length == 0 {
        return Err(Error::Argument("sequence length must be positive".into()));
    }
    let windows = tokens.len().saturating_sub(1) / length;
    if windows == 0 {
        return Err(Error::Argument(format!("length {length} exceeds the {} evaluation tokens", tokens.len())));
    }
    let mut total = 0.0;
    for w in 0..windows {
        let s = w * length;
        total += model.loss(&tokens[s..s + length + 1])?;
    }
    Ok((total / windows as f64, windows))
}

/// Perplexity at each length. Lengths must be strictly increasing; a length
/// that cannot be evaluated gets an error row and the sweep continues.
pub fn ppl_sweep<T: Scalar>(model: &Model<T>, tokens: &[usize], lengths: &[usize], model_tag: &str) -> Result<EvalReport> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!("sweep lengths must be non-empty and strictly increasing, got {lengths:?}")));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let row = match window_nll(model, tokens, length) {
            Ok((nll, windows)) => PplRow {
                sequence_length: length,
                perplexity: Some(nll.exp()),
                tokens_evaluated: windows * length,
                windows,
                error: None,
            },
            Err(e @ (Error::Argument(_) | Error::Index { .. })) => {
                PplRow { sequence_length: length, perplexity: None, tokens_evaluated: 0, windows: 0, error: Some(e.to_string()) }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(EvalReport {
        model_tag: model_tag.into(),
        encoding: model.config.selector().tag(),
        rows,
        throughput: Vec::new(),
        timestamp: timestamp(),
        config_hash: config_hash(&model.config)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelector {
    All,
    One(usize),
}

/// Per-head matrices of one layer; see [`dump_bias`].
#[derive(Clone, Debug, PartialEq)]
pub struct BiasDump<T> {
    pub layer: usize,
    /// What the matrices hold: `logit_delta`, `rope_logits` or `none`.
    pub content: &'static str,
    pub heads: Vec<(usize, Tensor<T>)>,
}

/// `%g`-style text with 6 significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    // rounding can carry into the next decade; let `{:e}` decide the exponent
    let sci = format!("{v:.5e}");
    let (mant, e) = sci.split_once('e').expect("exponent");
    let e: i32 = e.parse().expect("integer exponent");
    if (-4..6).contains(&e) {
        let decimals = (5 - e).max(0) as usize;
        let s = format!("{v:.decimals$}");
        trim_zeros(&s)
    } else {
        format!("{}e{}{:02}", trim_zeros(mant), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// The additive logit delta of each selected head in `layer` for `ids`, or for
/// RoPE the post-rotation scaled logits. Writes `layer{L}_head{H}.csv` files and
/// a `manifest.json` when `out_dir` is given.
pub fn dump_bias<T: Scalar>(
    model: &Model<T>,
    ids: &[usize],
    layer: usize,
    heads: HeadSelector,
    out_dir: Option<&Path>,
    cap: usize,
) -> Result<BiasDump<T>> {
    if ids.is_empty() {
        return Err(Error::Argument("dump input is empty".into()));
    }
    if ids.len() > cap {
        return Err(Error::Argument(format!("dump length {} exceeds the cap of {cap}", ids.len())));
    }
    if layer >= model.blocks.len() {
        return Err(Error::Index { what: "layer", index: layer, bound: model.blocks.len() });
    }
    let attn = &model.blocks[layer].attn;
    let selected: Vec<usize> = match heads {
        HeadSelector::All => (0..attn.heads).collect(),
        HeadSelector::One(h) if h < attn.heads => vec![h],
        HeadSelector::One(h) => return Err(Error::Index { what: "head", index: h, bound: attn.heads }),
    };
    let x = model.attention_input(ids, layer)?;
    let all = attn.head_matrices(&x)?;
    let content = match model.config.posenc_kind {
        k if k.is_additive() => "logit_delta",
        PosEncKind::Rope => "rope_logits",
        _ => "none",
    };
    let dump = BiasDump { layer, content, heads: selected.iter().map(|&h| (h, all[h].clone())).collect() };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (h, m) in &dump.heads {
            let name = format!("layer{layer}_head{h}.csv");
            fs::write(dir.join(&name), matrix_csv(m))?;
            files.push(name);
        }
        let manifest = serde_json::json!({
            "encoding": model.config.selector().tag(),
            "layer": layer,
            "heads": selected,
            "sequence_length": ids.len(),
            "content": content,
            "format": "csv, row-major, 6 significant digits",
            "files": files,
            "config_hash": config_hash(&model.config)?,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(dump)
}

pub fn matrix_csv<T: Scalar>(m: &Tensor<T>) -> String {
    let cols = m.last_dim();
    let mut s = String::with_capacity(m.len() * 10);
    for row in m.data().chunks(cols) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            s.push_str(&format_sig6(v.as_f64()));
        }
        s.push('\n');
    }
    s
}

pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',').map(|c| c.trim().parse::<f64>().map_err(|_| Error::Argument(format!("bad CSV cell `{c}`")))).collect()
        })
        .collect()
}

/// Median tokens/second over `repetitions` timed runs after one warmup run.
///
/// `batch` is only used by [`BenchMode::TrainBatched`].
pub fn bench(cfg: &ModelConfig, mode: BenchMode, t: usize, batch: usize, repetitions: usize, seed: u64) -> Result<ThroughputRow> {
    if t == 0 || repetitions == 0 || batch == 0 {
        return Err(Error::Argument("bench length, batch and repetitions must be positive".into()));
    }
    let mut cfg = cfg.clone();
    cfg.max_context = cfg.max_context.max(t);
    let model = Model::<f32>::new(cfg.clone(), seed)?;
    let ids: Vec<usize> = (0..batch * (t + 1)).map(|i| (i * 7 + 3) % cfg.vocab_size).collect();
    let run = || -> Result<(usize, u64)> {
        match mode {
            BenchMode::TrainBatched => {
                let inputs: Vec<usize> = (0..batch).flat_map(|b| ids[b * (t + 1)..b * (t + 1) + t].to_vec()).collect();
                let targets: Vec<usize> = (0..batch).flat_map(|b| ids[b * (t + 1) + 1..(b + 1) * (t + 1)].to_vec()).collect();
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape, true);
                let loss = model.loss_tape(&mut tape, &vars, &inputs, &targets, batch, None)?;
                tape.backward(loss)?;
                Ok((batch * t, tape.peak_bytes() as u64))
            }
            BenchMode::InferUnbatched => {
                let mut states = model.stream_states(t);
                for &tok in &ids[..t] {
                    std::hint::black_box(model.step(&mut states, tok)?);
                }
                let cache: usize = states.iter().map(|s| s.byte_size()).sum();
                Ok((t, cache as u64))
            }
            BenchMode::InferRecompute => {
                let mut peak = 0;
                for i in 1..=t {
                    let mut tape = Tape::inference();
                    let vars = model.bind(&mut tape, false);
                    let out = model.forward_tape(&mut tape, &vars, &ids[..i], 1, None)?;
                    std::hint::black_box(tape.value(out));
                    peak = peak.max(tape.peak_bytes());
                }
                Ok((t, peak as u64))
            }
        }
    };
    run()?;
    let mut rates = Vec::with_capacity(repetitions);
    let mut peak = 0;
    for _ in 0..repetitions {
        let start = Instant::now();
        let (tokens, bytes) = run()?;
        rates.push(tokens as f64 / start.elapsed().as_secs_f64());
        peak = peak.max(bytes);
    }
    Ok(ThroughputRow { mode, sequence_length: t, tokens_per_second: median(&mut rates), peak_bytes: peak, repetitions })
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditGroup {
    pub name: String,
    pub max_rel_err: f64,
    pub grad_norm: f64,
    pub entries_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub groups: Vec<AuditGroup>,
    pub threshold: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl AuditReport {
    pub fn group(&self, name: &str) -> Option<&AuditGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Finite-difference check of the loss gradient for every parameter tensor.
///
/// Intended for small 64-bit models (at most 2 layers, `ids` of at most 9
/// tokens so `t <= 8` positions are predicted).
pub fn grad_audit(model: &Model<f64>, ids: &[usize], threshold: f64, max_entries: Option<usize>) -> Result<AuditReport> {
    if model.config.n_layers > 2 || ids.len() < 2 || ids.len() > 9 {
        return Err(Error::Argument("grad_audit expects at most 2 layers and 2..=9 tokens".into()));
    }
    let params: Vec<Tensor<f64>> = model.stores().iter().flat_map(|s| s.iter().map(|p| p.value.clone())).collect();
    let names: Vec<String> = model.stores().iter().flat_map(|s| s.iter().map(|p| p.name.clone())).collect();
    let t = ids.len() - 1;
    let report = grad_check(
        |tape, vars| {
            let mv = model.vars_from(vars);
            model.loss_tape(tape, &mv, &ids[..t], &ids[1..], 1, None)
        },
        &params,
        GradCheckOptions { tolerance: threshold, max_entries, ..Default::default() },
    )?;
    let groups: Vec<AuditGroup> = report
        .params
        .iter()
        .map(|p| AuditGroup {
            name: names[p.param].clone(),
            max_rel_err: p.max_rel_err,
            grad_norm: p.analytic_norm,
            entries_checked: p.entries_checked,
            passed: p.max_rel_err.is_finite() && p.max_rel_err <= threshold,
        })
        .collect();
    let passed = groups.iter().all(|g| g.passed);
    Ok(AuditReport { groups, threshold, max_rel_err: report.max_rel_err, passed })
}

/// Merges reports into a CSV with one row per length and one column per report.
pub fn compare_table(reports: &[EvalReport]) -> String {
    let mut lengths: Vec<usize> = reports.iter().flat_map(|r| r.rows.iter().map(|row| row.sequence_length)).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut s = String::from("sequence_length");
    for r in reports {
        let _ = write!(s, ",{}", r.model_tag);
    }
    s.push('\n');
    for l in lengths {
        let _ = write!(s, "{l}");
        for r in reports {
            match r.perplexity_at(l) {
                Some(p) => {
                    let _ = write!(s, ",{p:.4}");
                }
                None => s.push_str(",-"),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(-1.0), "-1");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(1.5e-7), "1.5e-07");
        assert_eq!(format_sig6(999999.7), "1e+06");
        assert_eq!(format_sig6(-3.14159265), "-3.14159");
        for v in [1e-9, -2.5e-3, 0.1, 7.0, 123.456, -98765.4321, 3.3e12] {
            let back: f64 = format_sig6(v).parse().unwrap();
            assert!(((back - v) / v).abs() <= 5e-6, "{v}");
        }
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport {
            model_tag: "cable-a".into(),
            encoding: "cable".into(),
            rows: vec![
                PplRow { sequence_length: 64, perplexity: Some(3.141592653589793), tokens_evaluated: 640, windows: 10, error: None },
                PplRow { sequence_length: 128, perplexity: None, tokens_evaluated: 0, windows: 0, error: Some("too long".into()) },
            ],
            throughput: vec![ThroughputRow {
                mode: BenchMode::TrainBatched,
                sequence_length: 128,
                tokens_per_second: 1234.5678901234,
                peak_bytes: 42,
                repetitions: 5,
            }],
            timestamp: timestamp(),
            config_hash: config_hash(&ModelConfig::default()).unwrap(),
        };
        let json = r.to_json().unwrap();
        assert_eq!(EvalReport::from_json(&json).unwrap(), r);
        let keys: Vec<&str> = ["model_tag", "encoding", "rows", "throughput", "timestamp", "config_hash"].to_vec();
        let pos: Vec<usize> = keys.iter().map(|k| json.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(json.contains("\"train_batched\""));
    }

    #[test]
    fn compare_table_layout() {
        let mk = |tag: &str, p: [Option<f64>; 2]| EvalReport {
            model_tag: tag.into(),
            encoding: tag.into(),
            rows: [64, 128]
                .iter()
                .zip(p)
                .map(|(&l, p)| PplRow { sequence_length: l, perplexity: p, tokens_evaluated: 1, windows: 1, error: None })
                .collect(),
            throughput: vec![],
            timestamp: String::new(),
            config_hash: String::new(),
        };
        let t = compare_table(&[mk("a", [Some(2.0), Some(3.0)]), mk("b", [Some(4.0), None])]);
        assert_eq!(t, "sequence_length,a,b\n64,2.0000,4.0000\n128,3.0000,-\n");
    }

    #[test]
    fn doubling_grid() {
        assert_eq!(doubling_lengths(1024), vec![512, 1024, 2048, 4096, 8192]);
    }
}
