//! Big-integer operation and traffic accounting, and the closed-form cost
//! model it is reconciled against.
//!
//! Accounting convention (what one unit of each counter means):
//!
//! * server, per synapse: one exponentiation `⟦x⟧^w` and one multiplication
//!   into the running product; per neuron, one more of each for the bias
//!   `⟦1⟧^b`. Sign handling through a modular inverse is folded into the
//!   exponentiation.
//! * client: an encryption is two exponentiations (`g^t`, `r^n`) and one
//!   multiplication; a decryption is one exponentiation (`c^λ`) and two
//!   multiplications (the `L` quotient and the product with `μ`).
//! * big-int traffic counts data ciphertexts only; `n²` and `⟦1⟧` travel as
//!   key material and are tallied separately.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use thiserror::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub server_modexp: u64,
    pub server_modmul: u64,
    pub client_modexp: u64,
    pub client_modmul: u64,
    pub bigints_s2c: u64,
    pub bigints_c2s: u64,
    /// Total frame bytes per direction, framing included.
    pub bytes_s2c: u64,
    pub bytes_c2s: u64,
    /// Bytes of ciphertext magnitudes alone.
    pub payload_bytes_s2c: u64,
    pub payload_bytes_c2s: u64,
    /// `n²` and `⟦1⟧`.
    pub key_bigints_c2s: u64,
}

impl CostCounters {
    pub fn merge(&mut self, other: &CostCounters) {
        *self += *other;
    }

    pub fn is_zero(&self) -> bool {
        *self == CostCounters::default()
    }

    pub fn client_encrypt(&mut self, count: u64) {
        self.client_modexp += 2 * count;
        self.client_modmul += count;
    }

    pub fn client_decrypt(&mut self, count: u64) {
        self.client_modexp += count;
        self.client_modmul += 2 * count;
    }

    pub fn framing_overhead_bytes(&self) -> u64 {
        (self.bytes_s2c + self.bytes_c2s) - (self.payload_bytes_s2c + self.payload_bytes_c2s)
    }
}

impl AddAssign for CostCounters {
    fn add_assign(&mut self, o: CostCounters) {
        self.server_modexp += o.server_modexp;
        self.server_modmul += o.server_modmul;
        self.client_modexp += o.client_modexp;
        self.client_modmul += o.client_modmul;
        self.bigints_s2c += o.bigints_s2c;
        self.bigints_c2s += o.bigints_c2s;
        self.bytes_s2c += o.bytes_s2c;
        self.bytes_c2s += o.bytes_c2s;
        self.payload_bytes_s2c += o.payload_bytes_s2c;
        self.payload_bytes_c2s += o.payload_bytes_c2s;
        self.key_bigints_c2s += o.key_bigints_c2s;
    }
}

impl Add for CostCounters {
    type Output = CostCounters;

    fn add(mut self, o: CostCounters) -> CostCounters {
        self += o;
        self
    }
}

/// Counters per layer: index 0 is the input layer, `k` the k-th weight layer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerCounters(pub Vec<CostCounters>);

impl LayerCounters {
    pub fn with_layers(count: usize) -> Self {
        LayerCounters(vec![CostCounters::default(); count])
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut CostCounters {
        if self.0.len() <= k {
            self.0.resize(k + 1, CostCounters::default());
        }
        &mut self.0[k]
    }

    pub fn total(&self) -> CostCounters {
        self.0.iter().copied().fold(CostCounters::default(), Add::add)
    }

    /// Element-wise merge, e.g. of the client's and the server's view.
    pub fn merge(&mut self, other: &LayerCounters) {
        for (k, c) in other.0.iter().enumerate() {
            *self.layer_mut(k) += *c;
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostModelError {
    #[error("cost model needs at least two layer widths, got {0}")]
    TooFewLayers(usize),
    #[error("layer {layer}: {metric} predicted {predicted}, measured {measured}")]
    Mismatch {
        layer: usize,
        metric: &'static str,
        predicted: u64,
        measured: u64,
    },
}

/// Closed-form operation counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputePrediction {
    pub layer_sizes: Vec<usize>,
    /// `Σ m_k·m_{k-1}`: the server's `(C_e + C_m)` multiplier from the
    /// leading-order table.
    pub server_factor: u64,
    /// Leading-order client counts: `(2m₀ + 3Σm_k)·C_e + (m₀ + 3Σm_k)·C_m`.
    pub client_exp_table: u64,
    pub client_mul_table: u64,
    /// Exact per-layer counts under this crate's accounting convention.
    pub per_layer: Vec<CostCounters>,
}

impl ComputePrediction {
    pub fn exact_total(&self) -> CostCounters {
        self.per_layer.iter().copied().fold(CostCounters::default(), Add::add)
    }
}

/// Closed-form traffic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommPrediction {
    pub layer_sizes: Vec<usize>,
    pub key_bits: u64,
    /// `Σ_{k=1..L} m_k`
    pub bigints_s2c: u64,
    /// `Σ_{k=0..L-1} m_k`
    pub bigints_c2s: u64,
    pub per_layer: Vec<(u64, u64)>,
}

impl CommPrediction {
    pub fn total_bigints(&self) -> u64 {
        self.bigints_s2c + self.bigints_c2s
    }

    /// Traffic in bits when each big integer costs `key_bits`.
    pub fn total_bits(&self) -> u64 {
        self.total_bigints() * self.key_bits
    }
}

fn check_sizes(sizes: &[usize]) -> Result<(), CostModelError> {
    if sizes.len() < 2 {
        Err(CostModelError::TooFewLayers(sizes.len()))
    } else {
        Ok(())
    }
}

pub fn predict_compute(sizes: &[usize]) -> Result<ComputePrediction, CostModelError> {
    check_sizes(sizes)?;
    let m: Vec<u64> = sizes.iter().map(|&s| s as u64).collect();
    let last = m.len() - 1;
    let server_factor: u64 = m.windows(2).map(|w| w[0] * w[1]).sum();
    let tail: u64 = m[1..].iter().sum();

    let mut per_layer = Vec::with_capacity(m.len());
    let mut input = CostCounters::default();
    // data pixels plus ⟦1⟧
    input.client_encrypt(m[0] + 1);
    per_layer.push(input);
    for k in 1..=last {
        let synapses = m[k] * (m[k - 1] + 1);
        let mut c = CostCounters {
            server_modexp: synapses,
            server_modmul: synapses,
            ..CostCounters::default()
        };
        c.client_decrypt(m[k]);
        if k != last {
            c.client_encrypt(m[k]);
        }
        per_layer.push(c);
    }
    Ok(ComputePrediction {
        layer_sizes: sizes.to_vec(),
        server_factor,
        client_exp_table: 2 * m[0] + 3 * tail,
        client_mul_table: m[0] + 3 * tail,
        per_layer,
    })
}

pub fn predict_comm(sizes: &[usize], key_bits: u64) -> Result<CommPrediction, CostModelError> {
    check_sizes(sizes)?;
    let m: Vec<u64> = sizes.iter().map(|&s| s as u64).collect();
    let last = m.len() - 1;
    let per_layer: Vec<(u64, u64)> = (0..=last)
        .map(|k| {
            let s2c = if k == 0 { 0 } else { m[k] };
            let c2s = if k == last { 0 } else { m[k] };
            (s2c, c2s)
        })
        .collect();
    Ok(CommPrediction {
        layer_sizes: sizes.to_vec(),
        key_bits,
        bigints_s2c: m[1..].iter().sum(),
        bigints_c2s: m[..last].iter().sum(),
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconcileRow {
    pub layer: usize,
    pub metric: &'static str,
    pub predicted: u64,
    pub measured: u64,
}

impl ReconcileRow {
    pub fn delta(&self) -> i128 {
        self.measured as i128 - self.predicted as i128
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconcileReport {
    pub rows: Vec<ReconcileRow>,
    /// `server_exp / (server_exp + client_exp)`, measured.
    pub exp_share: f64,
    /// Same with exponentiations and multiplications weighted equally.
    pub combined_share: f64,
    /// Server `(exp + mul) / 2` relative to the leading-order factor.
    pub server_vs_table: f64,
    pub client_exp_vs_table: f64,
    pub client_mul_vs_table: f64,
    pub default_architecture: bool,
}

/// Minimum exponentiation share flagged for the default architecture.
pub const EXP_SHARE_FLOOR: f64 = 0.95;
/// Agreement window between exact counts and the leading-order table.
pub const TABLE_TOLERANCE: f64 = 0.01;

impl ReconcileReport {
    pub fn first_mismatch(&self) -> Option<&ReconcileRow> {
        self.rows.iter().find(|r| r.predicted != r.measured)
    }

    /// Every row exact.
    pub fn check(&self) -> Result<(), CostModelError> {
        match self.first_mismatch() {
            None => Ok(()),
            Some(r) => Err(CostModelError::Mismatch {
                layer: r.layer,
                metric: r.metric,
                predicted: r.predicted,
                measured: r.measured,
            }),
        }
    }

    pub fn within_table_tolerance(&self) -> bool {
        [self.server_vs_table, self.client_exp_vs_table, self.client_mul_vs_table]
            .iter()
            .all(|r| (r - 1.0).abs() <= TABLE_TOLERANCE)
    }

    /// Set when the default architecture's exponentiation share drops below
    /// [`EXP_SHARE_FLOOR`].
    pub fn share_flag(&self) -> bool {
        self.default_architecture && self.exp_share < EXP_SHARE_FLOOR
    }

    /// `layer,direction,predicted,measured,delta` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,direction,predicted,measured,delta\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.layer, r.metric, r.predicted, r.measured, r.delta());
        }
        out
    }
}

/// Which party's measurements a counter set holds. Each side only observes
/// its own operations; traffic is visible to both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Server,
    Client,
    /// Client traffic and operations plus server operations.
    Combined,
}

impl View {
    fn has_server_ops(self) -> bool {
        self != View::Client
    }

    fn has_client_ops(self) -> bool {
        self != View::Server
    }
}

/// Builds the combined view from the two parties' per-layer counters.
pub fn combine_views(client: &LayerCounters, server: &LayerCounters) -> LayerCounters {
    let mut out = client.clone();
    for (k, s) in server.0.iter().enumerate() {
        let c = out.layer_mut(k);
        c.server_modexp += s.server_modexp;
        c.server_modmul += s.server_modmul;
    }
    out
}

/// Compares measured per-layer counters against the closed forms. Rows the
/// view cannot observe are omitted, and the share ratios fall back to the
/// predicted counts for the unobserved side.
pub fn reconcile(
    measured: &LayerCounters,
    view: View,
    compute: &ComputePrediction,
    comm: &CommPrediction,
) -> ReconcileReport {
    let mut rows = Vec::new();
    let layers = compute.per_layer.len();
    for k in 0..layers {
        let m = measured.0.get(k).copied().unwrap_or_default();
        let p = compute.per_layer[k];
        let (s2c, c2s) = comm.per_layer[k];
        let row = |metric, predicted, measured| ReconcileRow {
            layer: k,
            metric,
            predicted,
            measured,
        };
        rows.push(row("s2c", s2c, m.bigints_s2c));
        rows.push(row("c2s", c2s, m.bigints_c2s));
        if view.has_server_ops() {
            rows.push(row("server_exp", p.server_modexp, m.server_modexp));
            rows.push(row("server_mul", p.server_modmul, m.server_modmul));
        }
        if view.has_client_ops() {
            rows.push(row("client_exp", p.client_modexp, m.client_modexp));
            rows.push(row("client_mul", p.client_modmul, m.client_modmul));
        }
    }
    for (k, extra) in measured.0.iter().enumerate().skip(layers) {
        rows.push(ReconcileRow {
            layer: k,
            metric: "unexpected_layer",
            predicted: 0,
            measured: extra.bigints_s2c + extra.bigints_c2s + extra.server_modexp + extra.client_modexp,
        });
    }
    let t = measured.total();
    let p = compute.exact_total();
    let (se, sm) = if view.has_server_ops() {
        (t.server_modexp, t.server_modmul)
    } else {
        (p.server_modexp, p.server_modmul)
    };
    let (ce, cm) = if view.has_client_ops() {
        (t.client_modexp, t.client_modmul)
    } else {
        (p.client_modexp, p.client_modmul)
    };
    let ratio = |a: u64, b: u64| a as f64 / (b.max(1)) as f64;
    ReconcileReport {
        rows,
        exp_share: ratio(se, se + ce),
        combined_share: ratio(se + sm, se + sm + ce + cm),
        server_vs_table: (se + sm) as f64 / 2.0 / compute.server_factor.max(1) as f64,
        client_exp_vs_table: ratio(ce, compute.client_exp_table),
        client_mul_vs_table: ratio(cm, compute.client_mul_table),
        default_architecture: compute.layer_sizes == [1024, 128, 32, 2],
    }
}

/// Cost table for the CLI: one row per layer plus totals.
pub fn prediction_csv(compute: &ComputePrediction, comm: &CommPrediction) -> String {
    let mut out = String::from("layer,width,server_exp,server_mul,client_exp,client_mul,s2c,c2s\n");
    for (k, c) in compute.per_layer.iter().enumerate() {
        let (s2c, c2s) = comm.per_layer[k];
        let _ = writeln!(
            out,
            "{k},{},{},{},{},{},{s2c},{c2s}",
            compute.layer_sizes[k], c.server_modexp, c.server_modmul, c.client_modexp, c.client_modmul
        );
    }
    let t = compute.exact_total();
    let _ = writeln!(
        out,
        "total,,{},{},{},{},{},{}",
        t.server_modexp, t.server_modmul, t.client_modexp, t.client_modmul, comm.bigints_s2c, comm.bigints_c2s
    );
    let _ = writeln!(
        out,
        "table,,{f},{f},{},{},{},{}",
        compute.client_exp_table,
        compute.client_mul_table,
        comm.bigints_s2c,
        comm.bigints_c2s,
        f = compute.server_factor
    );
    let _ = writeln!(out, "bits,,,,,,{},{}", comm.bigints_s2c * comm.key_bits, comm.bigints_c2s * comm.key_bits);
    out
}

/// Binary classification summary with class 0 ("before") as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub const POSITIVE: usize = 0;

    pub fn from_labels(predicted: &[usize], truth: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == Self::POSITIVE, t == Self::POSITIVE) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    pub fn precision(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fp).max(1) as f64
    }

    pub fn recall(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_).max(1) as f64
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}
