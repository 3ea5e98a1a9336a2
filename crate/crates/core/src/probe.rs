//! Per-layer attention-similarity statistics.
//!
//! For every layer, averaged over heads, real (non-sink) positions and
//! sequences:
//!
//! - `mean_vv`: cosine of value vectors `v_i`, `v_j` over unordered pairs `i != j`;
//! - `mean_diag`: the self attention weight `a_{i,i}` (the row still includes sink mass);
//! - `mean_yv`: cosine of the layer's head output with `v_i`, where the output is
//!   `y_i` for SA and the rejected `z_i` for XSA.
//!
//! Vectors of zero norm are skipped in cosine averages. For `z` "zero" means
//! at rounding level relative to `y` (`|z| <= 64 eps |y|`): at a position whose
//! attention is entirely on itself `z` is exactly zero in exact arithmetic
//! and only rounding residue remains, whose direction is meaningless.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, AttentionTrace, TraceCapture};
use crate::model::Model;
use crate::tensor::{no_grad, Float};
use crate::training::{make_batches, Dataset, Split};
use crate::{Error, Result};

pub const CSV_HEADER: &str = "layer,mean_vv,mean_diag,mean_yv,n_sequences,n_heads,n_positions";

const ROUNDING_FACTOR: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStats {
    pub layer: usize,
    pub mean_vv: f64,
    pub mean_diag: f64,
    pub mean_yv: f64,
    pub n_sequences: usize,
    pub n_heads: usize,
    /// Real positions per sequence.
    pub n_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub mode: AttentionMode,
    pub seq_len: usize,
    pub n_sinks: usize,
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ProbeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ProbeFormat::Csv),
            "json" => Ok(ProbeFormat::Json),
            other => Err(Error::config(format!("unknown probe format `{other}` (csv|json)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub capture: TraceCapture,
    /// Sequences per forward pass.
    pub batch: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            n_sequences: 64,
            seq_len: 128,
            seed: 0,
            capture: TraceCapture::Diag,
            batch: 8,
        }
    }
}

/// Running sums for one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accum {
    pub vv_sum: f64,
    pub vv_n: u64,
    pub diag_sum: f64,
    pub diag_n: u64,
    pub yv_sum: f64,
    pub yv_n: u64,
}

impl Accum {
    pub fn add(&mut self, o: &Accum) {
        self.vv_sum += o.vv_sum;
        self.vv_n += o.vv_n;
        self.diag_sum += o.diag_sum;
        self.diag_n += o.diag_n;
        self.yv_sum += o.yv_sum;
        self.yv_n += o.yv_n;
    }

    fn mean(sum: f64, n: u64) -> f64 {
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    pub fn mean_vv(&self) -> f64 {
        Self::mean(self.vv_sum, self.vv_n)
    }

    pub fn mean_diag(&self) -> f64 {
        Self::mean(self.diag_sum, self.diag_n)
    }

    pub fn mean_yv(&self) -> f64 {
        Self::mean(self.yv_sum, self.yv_n)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Statistics of sequence `b` of one layer's trace.
pub fn sequence_stats<S: Float>(trace: &AttentionTrace<S>, b: usize) -> Accum {
    let shape = trace.values.shape();
    let (h_n, t_all, d) = (shape[1], shape[2], shape[3]);
    let k = trace.n_sinks;
    let tiny = ROUNDING_FACTOR * S::epsilon().as_f64();
    let v_all = trace.values.data();
    let y_all = trace.outputs.data();
    let out_all = trace.layer_outputs().data();
    let diag = trace.diag.data();
    let mut acc = Accum::default();
    for h in 0..h_n {
        let base = (b * h_n + h) * t_all;
        let row = |src: &[S], i: usize| -> Vec<f64> {
            src[(base + i) * d..(base + i + 1) * d].iter().map(|x| x.as_f64()).collect()
        };
        let vs: Vec<Vec<f64>> = (k..t_all).map(|i| row(v_all, i)).collect();
        let norms: Vec<f64> = vs.iter().map(|v| dot(v, v).sqrt()).collect();
        for i in 0..vs.len() {
            if norms[i] == 0.0 {
                continue;
            }
            for j in i + 1..vs.len() {
                if norms[j] == 0.0 {
                    continue;
                }
                acc.vv_sum += dot(&vs[i], &vs[j]) / (norms[i] * norms[j]);
                acc.vv_n += 1;
            }
        }
        for (n, i) in (k..t_all).enumerate() {
            acc.diag_sum += diag[base + i].as_f64();
            acc.diag_n += 1;
            let out = row(out_all, i);
            let on = dot(&out, &out).sqrt();
            let yn = dot(&row(y_all, i), &row(y_all, i)).sqrt();
            if norms[n] == 0.0 || on == 0.0 || on <= tiny * yn {
                continue;
            }
            acc.yv_sum += dot(&out, &vs[n]) / (on * norms[n]);
            acc.yv_n += 1;
        }
    }
    acc
}

/// Per-sequence, per-layer sums for `n_sequences` windows drawn from the
/// training range of `data`.
pub fn probe_sequences<S: Float>(model: &Model<S>, data: &Dataset, opts: &ProbeOptions) -> Result<Vec<Vec<Accum>>> {
    let cfg = model.config();
    if opts.seq_len == 0 || opts.seq_len > cfg.max_seq_len {
        return Err(Error::config(format!(
            "probe seq_len {} must be in 1..={}",
            opts.seq_len, cfg.max_seq_len
        )));
    }
    if opts.n_sequences == 0 || opts.batch == 0 {
        return Err(Error::config("n_sequences and batch must be positive"));
    }
    let _guard = no_grad();
    let mut stream = make_batches(data, opts.seq_len, opts.batch, Split::Train, opts.seed)?;
    let capture = match opts.capture {
        TraceCapture::Off => TraceCapture::Diag,
        c => c,
    };
    let mut out = Vec::with_capacity(opts.n_sequences);
    while out.len() < opts.n_sequences {
        let batch = stream.next_batch();
        let take = (opts.n_sequences - out.len()).min(batch.batch);
        let ids = &batch.inputs[..take * opts.seq_len];
        let (_, traces) = model.forward_traced(ids, take, opts.seq_len, capture)?;
        for b in 0..take {
            out.push(traces.iter().map(|tr| sequence_stats(tr, b)).collect());
        }
    }
    Ok(out)
}

/// Pools per-sequence sums into a report.
pub fn pool(model: &crate::model::ModelConfig, seq_len: usize, seqs: &[Vec<Accum>]) -> Result<ProbeReport> {
    let n_layers = model.n_layers;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut acc = Accum::default();
        for s in seqs {
            acc.add(&s[l]);
        }
        if acc.diag_n == 0 {
            return Err(Error::Data(format!("layer {l} has no probed positions")));
        }
        layers.push(LayerStats {
            layer: l,
            mean_vv: acc.mean_vv(),
            mean_diag: acc.mean_diag(),
            mean_yv: acc.mean_yv(),
            n_sequences: seqs.len(),
            n_heads: model.n_heads,
            n_positions: seq_len,
        });
    }
    Ok(ProbeReport {
        mode: model.mode,
        seq_len,
        n_sinks: model.n_sinks,
        layers,
    })
}

/// Runs the model with trace capture over random windows and reports the
/// three statistics per layer. Deterministic in `opts.seed`.
pub fn probe_run<S: Float>(model: &Model<S>, data: &Dataset, opts: &ProbeOptions) -> Result<ProbeReport> {
    let seqs = probe_sequences(model, data, opts)?;
    pool(model.config(), opts.seq_len, &seqs)
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{},{},{}",
                l.layer, l.mean_vv, l.mean_diag, l.mean_yv, l.n_sequences, l.n_heads, l.n_positions
            );
        }
        out
    }

    /// Layer rows of a CSV report.
    pub fn parse_csv(text: &str) -> Result<Vec<LayerStats>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => return Err(Error::Parse(format!("probe csv header {other:?}"))),
        }
        let mut layers = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse(format!("probe csv row needs 7 fields: {line:?}")));
            }
            let bad = |what: &str| Error::Parse(format!("bad {what} in {line:?}"));
            layers.push(LayerStats {
                layer: f[0].parse().map_err(|_| bad("layer"))?,
                mean_vv: f[1].parse().map_err(|_| bad("mean_vv"))?,
                mean_diag: f[2].parse().map_err(|_| bad("mean_diag"))?,
                mean_yv: f[3].parse().map_err(|_| bad("mean_yv"))?,
                n_sequences: f[4].parse().map_err(|_| bad("n_sequences"))?,
                n_heads: f[5].parse().map_err(|_| bad("n_heads"))?,
                n_positions: f[6].parse().map_err(|_| bad("n_positions"))?,
            });
        }
        Ok(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(format!("probe json: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("probe json: {e}")))
    }

    pub fn render(&self, format: ProbeFormat) -> Result<String> {
        match format {
            ProbeFormat::Csv => Ok(self.to_csv()),
            ProbeFormat::Json => self.to_json(),
        }
    }

    /// Writes the report to `path`.
    pub fn emit(&self, path: &Path, format: ProbeFormat) -> Result<()> {
        std::fs::write(path, self.render(format)?)?;
        Ok(())
    }

    /// Checks value ranges and counts.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let in_unit = |x: f64| (-1.0..=1.0).contains(&x);
            if !in_unit(l.mean_vv) || !in_unit(l.mean_yv) || !(0.0..=1.0).contains(&l.mean_diag) {
                return Err(Error::Data(format!("layer {} statistics out of range: {l:?}", l.layer)));
            }
            if l.n_sequences == 0 || l.n_heads == 0 || l.n_positions == 0 {
                return Err(Error::Data(format!("layer {} has zero counts", l.layer)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tokenizer};

    fn data() -> Dataset {
        let text: Vec<u8> = (0..4000u32).map(|i| b"abcdefgh ijk"[(i * i % 12) as usize]).collect();
        Dataset::from_bytes(&text, &Tokenizer::Bytes, 0.0).unwrap()
    }

    fn report(mode: AttentionMode, n_sinks: usize) -> ProbeReport {
        let cfg = ModelConfig {
            mode,
            n_sinks,
            max_seq_len: 32,
            ..ModelConfig::tiny()
        };
        let m = Model::<f64>::new(&cfg).unwrap();
        let opts = ProbeOptions {
            n_sequences: 5,
            seq_len: 24,
            batch: 2,
            ..ProbeOptions::default()
        };
        probe_run(&m, &data(), &opts).unwrap()
    }

    #[test]
    fn untrained_sa_statistics_are_in_range() {
        let r = report(AttentionMode::Sa, 0);
        assert_eq!(r.layers.len(), 2);
        r.validate().unwrap();
        for l in &r.layers {
            assert!(l.mean_diag > 0.0 && l.mean_diag < 1.0);
            assert_eq!((l.n_sequences, l.n_heads, l.n_positions), (5, 4, 24));
        }
    }

    #[test]
    fn xsa_outputs_are_orthogonal_to_values() {
        for sinks in [0, 2] {
            let r = report(AttentionMode::Xsa, sinks);
            assert_eq!(r.n_sinks, sinks);
            for l in &r.layers {
                assert!(l.mean_yv.abs() <= 1e-5, "{l:?}");
            }
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = report(AttentionMode::Sa, 1);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        let rows = ProbeReport::parse_csv(&csv).unwrap();
        assert_eq!(rows, r.layers);
        let again = ProbeReport {
            layers: rows,
            ..r.clone()
        };
        assert_eq!(again.to_csv(), csv);
        let json = r.to_json().unwrap();
        let back = ProbeReport::from_json(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn seq_len_beyond_the_model_is_rejected() {
        let m = Model::<f64>::new(&ModelConfig {
            max_seq_len: 16,
            ..ModelConfig::tiny()
        })
        .unwrap();
        let opts = ProbeOptions {
            seq_len: 17,
            ..ProbeOptions::default()
        };
        assert!(probe_run(&m, &data(), &opts).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(report(AttentionMode::Sa, 0), report(AttentionMode::Sa, 0));
    }
}
