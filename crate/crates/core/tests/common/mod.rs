// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures and independent reference implementations shared by the
//! integration tests. The oracles here work on plain `Vec<Vec<f64>>` and do
//! not call into the crate's forward pass or linear algebra.

#![allow(dead_code, clippy::needless_range_loop)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snrf_core::neuron::{NeuronId, NeuronKind};
use snrf_core::tensor::Dense;
use snrf_core::theory::QuadraticScenario;
use snrf_core::{Matrix64, ModelConfig, ProbeCorpus, TokenId, WeightMap};

pub type Vv = Vec<Vec<f64>>;

pub const FIXTURE_SEEDS: [u64; 3] = [11, 12, 13];
pub const CORPUS_SEED: u64 = 7;

pub fn fixture_config() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 8, d_inter: 16, vocab: 32 }
}

pub fn fixture_models() -> Vec<WeightMap> {
    FIXTURE_SEEDS.iter().map(|&s| WeightMap::random(fixture_config(), s).unwrap()).collect()
}

/// (source, target) pairs: the target is a fixture model, the source a
/// perturbed copy of it.
pub fn fixture_pairs() -> Vec<(WeightMap, WeightMap)> {
    fixture_models()
        .into_iter()
        .zip(FIXTURE_SEEDS)
        .map(|(tgt, s)| (tgt.perturbed(0.5, s + 100).unwrap(), tgt))
        .collect()
}

/// Ten contexts of the form `INST a b c d e SEP f g h`.
pub fn fixture_corpus_text() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED);
    (0..10)
        .map(|_| {
            let mut v = vec![1u32];
            v.extend((0..5).map(|_| rng.gen_range(3..32u32)));
            v.push(2);
            v.extend((0..3).map(|_| rng.gen_range(3..32u32)));
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ") + "\n"
        })
        .collect()
}

pub fn fixture_corpus() -> ProbeCorpus {
    ProbeCorpus::parse(&fixture_corpus_text(), 32, "fixture").unwrap()
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// `|a − b| ≤ tol · max(|a|, |b|)`, with a tiny absolute floor so exact zeros
/// compare equal to rounding-level values.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-14
}

// ---- plain matrix helpers ----

pub fn to_vv<T: snrf_core::tensor::Element>(m: &Dense<T>) -> Vv {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c).to_f64()).collect()).collect()
}

pub fn mm(a: &Vv, b: &Vv) -> Vv {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn sub_sq_norm(a: &Vv, b: &Vv) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q))).sum()
}

fn add(a: &Vv, b: &Vv) -> Vv {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn scale_col(m: &mut Vv, k: usize, f: f64) {
    for row in m {
        row[k] *= f;
    }
}

fn weight(w: &WeightMap, layer: usize, part: &str) -> Vv {
    to_vv(w.tensor(&format!("layers.{layer}.{part}.weight")).unwrap())
}

// ---- reference transformer ----

/// Column multipliers keyed by neuron.
pub type Scales = Vec<(NeuronId, f64)>;

fn factor(scales: &Scales, layer: usize, kind: NeuronKind, k: usize) -> f64 {
    scales
        .iter()
        .filter(|(n, _)| n.layer == layer && n.index == k && site(n.kind) == site(kind))
        .map(|(_, f)| f)
        .product()
}

// fwd.up and fwd.down act on the same intermediate activation.
fn site(kind: NeuronKind) -> u8 {
    match kind {
        NeuronKind::AttnQ => 0,
        NeuronKind::AttnK => 1,
        NeuronKind::AttnV => 2,
        NeuronKind::FwdUp | NeuronKind::FwdDown => 3,
    }
}

/// Attention sublayer output `x + softmax_causal(QKᵀ/√d) V`.
pub fn attn_sublayer(x: &Vv, wq: &Vv, wk: &Vv, wv: &Vv, zero: Option<(NeuronKind, usize)>) -> Vv {
    let (mut q, mut k, mut v) = (mm(x, wq), mm(x, wk), mm(x, wv));
    match zero {
        Some((NeuronKind::AttnQ, i)) => scale_col(&mut q, i, 0.0),
        Some((NeuronKind::AttnK, i)) => scale_col(&mut k, i, 0.0),
        Some((NeuronKind::AttnV, i)) => scale_col(&mut v, i, 0.0),
        _ => {}
    }
    attn_from_qkv(x, &q, &k, &v)
}

fn attn_from_qkv(x: &Vv, q: &Vv, k: &Vv, v: &Vv) -> Vv {
    let n = x.len();
    let d = q[0].len() as f64;
    let mut out = x.clone();
    for i in 0..n {
        let s: Vec<f64> = (0..=i).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..out[i].len() {
            out[i][c] += (0..=i).map(|j| e[j] / z * v[j][c]).sum::<f64>();
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// MLP sublayer output `x + (SiLU(x W_gate) ⊙ x W_up) W_down`.
pub fn mlp_sublayer(x: &Vv, wg: &Vv, wu: &Vv, wd: &Vv, zero_h: Option<usize>) -> Vv {
    let (g, u) = (mm(x, wg), mm(x, wu));
    let mut h: Vv = g.iter().zip(&u).map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| silu(*a) * b).collect()).collect();
    if let Some(k) = zero_h {
        scale_col(&mut h, k, 0.0);
    }
    add(x, &mm(&h, wd))
}

pub struct NaiveOutput {
    /// Per layer: (input to attention, input to MLP).
    pub layer_inputs: Vec<(Vv, Vv)>,
    pub hidden: Vv,
    pub logits: Vv,
}

pub fn naive_forward(w: &WeightMap, tokens: &[TokenId], scales: &Scales) -> NaiveOutput {
    let cfg = w.config();
    let embed = to_vv(w.embed());
    let mut x: Vv = tokens.iter().map(|&t| embed[t as usize].clone()).collect();
    let mut layer_inputs = Vec::new();
    for l in 0..cfg.n_layers {
        let (mut q, mut k, mut v) =
            (mm(&x, &weight(w, l, "attn.q")), mm(&x, &weight(w, l, "attn.k")), mm(&x, &weight(w, l, "attn.v")));
        for c in 0..cfg.d_model {
            scale_col(&mut q, c, factor(scales, l, NeuronKind::AttnQ, c));
            scale_col(&mut k, c, factor(scales, l, NeuronKind::AttnK, c));
            scale_col(&mut v, c, factor(scales, l, NeuronKind::AttnV, c));
        }
        let mid = attn_from_qkv(&x, &q, &k, &v);
        let (g, u) = (mm(&mid, &weight(w, l, "mlp.gate")), mm(&mid, &weight(w, l, "mlp.up")));
        let mut h: Vv =
            g.iter().zip(&u).map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| silu(*a) * b).collect()).collect();
        for c in 0..cfg.d_inter {
            scale_col(&mut h, c, factor(scales, l, NeuronKind::FwdUp, c));
        }
        let out = add(&mid, &mm(&h, &weight(w, l, "mlp.down")));
        layer_inputs.push((x, mid));
        x = out;
    }
    let logits = mm(&x, &to_vv(w.unembed()));
    NaiveOutput { layer_inputs, hidden: x, logits }
}

/// Squared change of the owning sublayer's output when neuron `n` is
/// zeroed, by direct re-execution on the unablated inputs.
pub fn oracle_layer_impact(w: &WeightMap, tokens: &[TokenId], n: NeuronId) -> f64 {
    let run = naive_forward(w, tokens, &Vec::new());
    let (x, mid) = &run.layer_inputs[n.layer];
    let l = n.layer;
    if n.kind.is_attention() {
        let (wq, wk, wv) = (weight(w, l, "attn.q"), weight(w, l, "attn.k"), weight(w, l, "attn.v"));
        let base = attn_sublayer(x, &wq, &wk, &wv, None);
        let cut = attn_sublayer(x, &wq, &wk, &wv, Some((n.kind, n.index)));
        sub_sq_norm(&base, &cut)
    } else {
        let (wg, wu, wd) = (weight(w, l, "mlp.gate"), weight(w, l, "mlp.up"), weight(w, l, "mlp.down"));
        let base = mlp_sublayer(mid, &wg, &wu, &wd, None);
        let cut = mlp_sublayer(mid, &wg, &wu, &wd, Some(n.index));
        sub_sq_norm(&base, &cut)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Step-by-step greedy decode with the reference forward pass. Returns the
/// generated tokens only.
pub fn oracle_decode(w: &WeightMap, prompt: &[TokenId], max_new: usize, scales: &Scales) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let run = naive_forward(w, &seq, scales);
        let next = argmax(run.logits.last().unwrap()) as TokenId;
        seq.push(next);
        out.push(next);
        if next == 0 {
            break;
        }
    }
    out
}

// ---- linear algebra oracle ----

/// Singular values from a cyclic two-sided Jacobi eigen-decomposition of
/// `MᵀM`, descending.
pub fn oracle_singular_values(m: &Vv) -> Vec<f64> {
    let n = m[0].len();
    let mut a: Vv = (0..n).map(|i| (0..n).map(|j| m.iter().map(|r| r[i] * r[j]).sum()).collect()).collect();
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|i| a[i][i].max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv.truncate(m.len().min(n));
    sv
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix64 {
    Matrix64::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

// ---- quadratic loss oracle ----

/// `L(W) = Σ g_ij (W − W₀)_ij + ½ Σ h_ij (W − W₀)²_ij`, with `h_ij = μ_S` on
/// rows in S and `μ_⊥` elsewhere, summed coordinate by coordinate.
pub fn coordinatewise_loss(sc: &QuadraticScenario, w0: &Vv, w: &Vv) -> f64 {
    let p = &sc.params;
    let mut total = 0.0;
    for i in 0..p.rows {
        let h = if i < p.s_size { p.mu_s } else { p.mu_perp };
        for j in 0..p.cols {
            let d = w[i][j] - w0[i][j];
            total += sc.g.get(i, j) * d + 0.5 * h * d * d;
        }
    }
    total
}

// ---- CLI harness ----

pub fn snrf_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_snrf"))
}

/// A temp directory holding fixture inputs under stable relative names, so
/// that runs from it produce identical manifests.
pub struct CliWorkspace {
    pub dir: tempfile::TempDir,
}

impl CliWorkspace {
    pub fn new() -> Self {
        use snrf_core::profile::{context_neurons, ImpactMode, Selector};
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let (src, tgt) = fixture_pairs().remove(0);
        snrf_core::save_checkpoint(&tgt, p.join("tgt.snrf")).unwrap();
        snrf_core::save_checkpoint(&src, p.join("src.snrf")).unwrap();
        std::fs::write(p.join("corpus.txt"), fixture_corpus_text()).unwrap();
        let vocab: String = (0..32).map(|i| format!("{i}\ttok{i}\n")).collect();
        std::fs::write(p.join("vocab.tsv"), vocab).unwrap();
        let corpus = fixture_corpus();
        let sel = Selector::TopFraction(0.5);
        context_neurons(&tgt, &corpus, sel, ImpactMode::FullModel).unwrap().save(p.join("set_a.tsv")).unwrap();
        context_neurons(&src, &corpus, sel, ImpactMode::FullModel).unwrap().save(p.join("set_b.tsv")).unwrap();
        Self { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run(&self, args: &[&str]) -> std::process::Output {
        self.run_env(args, &[])
    }

    pub fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> std::process::Output {
        let mut cmd = std::process::Command::new(snrf_bin());
        cmd.current_dir(self.dir.path()).args(args);
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }
}

/// Every subcommand with its arguments; `OUT` marks the output location.
pub fn cli_invocations() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        (
            "profile-layer-local",
            vec!["profile", "--model", "tgt.snrf", "--corpus", "corpus.txt", "--select", "top:0.5", "--out", "OUT"],
        ),
        (
            "profile-full",
            vec![
                "profile",
                "--model",
                "tgt.snrf",
                "--corpus",
                "corpus.txt",
                "--mode",
                "full",
                "--select",
                "abs:0.05",
                "--out",
                "OUT",
            ],
        ),
        ("shared", vec!["shared", "--set-a", "set_a.tsv", "--set-b", "set_b.tsv", "--out", "OUT"]),
        (
            "ablate-eval",
            vec![
                "ablate-eval",
                "--model",
                "tgt.snrf",
                "--corpus",
                "corpus.txt",
                "--set",
                "set_a.tsv",
                "--random-budget-from",
                "set_a.tsv",
                "--draws",
                "5",
                "--seed",
                "3",
                "--out",
                "OUT",
            ],
        ),
        (
            "amplify",
            vec![
                "amplify",
                "--model",
                "tgt.snrf",
                "--corpus",
                "corpus.txt",
                "--neuron",
                "1:fwd.up:4",
                "--lambda",
                "8",
                "--max-new",
                "8",
                "--vocab",
                "vocab.tsv",
                "--out",
                "OUT",
            ],
        ),
        (
            "merge-snrf",
            vec![
                "merge",
                "--src",
                "src.snrf",
                "--tgt",
                "tgt.snrf",
                "--shared",
                "set_a.tsv",
                "--rank",
                "2",
                "--beta",
                "0.5",
                "--out",
                "OUT/m.snrf",
            ],
        ),
        (
            "merge-linear",
            vec![
                "merge",
                "--method",
                "linear",
                "--src",
                "src.snrf",
                "--tgt",
                "tgt.snrf",
                "--beta",
                "0.5",
                "--out",
                "OUT/m.snrf",
            ],
        ),
        (
            "merge-dare",
            vec![
                "merge",
                "--method",
                "dare",
                "--src",
                "src.snrf",
                "--tgt",
                "tgt.snrf",
                "--beta",
                "0.5",
                "--drop-prob",
                "0.3",
                "--seed",
                "4",
                "--out",
                "OUT/m.snrf",
            ],
        ),
        (
            "validate-theory",
            vec!["validate-theory", "--scenarios", "20", "--rank", "2", "--seed", "9", "--out", "OUT/sweep.csv"],
        ),
        ("init", vec!["init", "--seed", "5", "--out", "OUT/m.snrf"]),
        ("init-base", vec!["init", "--base", "tgt.snrf", "--noise", "0.2", "--seed", "5", "--out", "OUT/m.snrf"]),
    ]
}

/// Relative path → bytes for every file below `root`.
pub fn read_tree(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Runs one invocation into `root`, creating the parent for file outputs.
pub fn run_into(ws: &CliWorkspace, args: &[&str], root: &str) -> std::process::Output {
    std::fs::create_dir_all(ws.path(root)).unwrap();
    let out_dir = format!("{root}/out");
    let args: Vec<String> = args.iter().map(|a| a.replace("OUT", &out_dir)).collect();
    if args.iter().any(|a| a.starts_with(&format!("{out_dir}/"))) {
        std::fs::create_dir_all(ws.path(&out_dir)).unwrap();
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ws.run(&refs)
}

// ---- merge helpers ----

/// True when every entry outside the shared rows/columns equals `tgt` bit
/// for bit.
pub fn non_shared_untouched(out: &WeightMap, tgt: &WeightMap, shared: &snrf_core::NeuronSet) -> bool {
    let cfg = tgt.config();
    for (name, t) in tgt.tensors() {
        let o = out.tensor(name).unwrap();
        let owner = (0..cfg.n_layers)
            .flat_map(|l| snrf_core::model::Projection::ALL.map(|p| (l, p)))
            .find(|(l, p)| &p.tensor_name(*l) == name);
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                let addressed = match owner {
                    Some((l, p)) => {
                        let (kind, axis) = p.neuron_axis();
                        let idx = if axis == snrf_core::tensor::Axis::Rows { r } else { c };
                        shared.contains(&NeuronId::new(l, kind, idx))
                    }
                    None => false,
                };
                if !addressed && o.get(r, c).to_bits() != t.get(r, c).to_bits() {
                    return false;
                }
            }
        }
    }
    true
}
