// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use snrf_core::checkpoint::{load_checkpoint, load_corpus, load_vocab, WeightMap};
use snrf_core::error::{Error, Result};
use snrf_core::manifest::{sidecar_manifest_path, write_atomic, RunManifest, StagedDir};
use snrf_core::merge::{merge as run_merge, MergeConfig, MergeMethod, DEFAULT_RANK};
use snrf_core::model::ModelConfig;
use snrf_core::neuron::NeuronSet;
use snrf_core::probe::{amplified_generate, baseline_generate, probe_prompt, token_frequency};
use snrf_core::profile::{
    budget_of, context_neurons_from_reports, histogram_csv, layer_module_histogram, output_delta, overlap_stats,
    profile_corpus, random_neuron_set,
};
use snrf_core::theory::{run_sweep, summarize, sweep_csv, SweepConfig};
use snrf_core::TokenId;

use crate::{AblateArgs, AmplifyArgs, InitArgs, MergeArgs, ProfileArgs, SharedArgs, TheoryArgs};

fn load_set(path: &Path, cfg: Option<&ModelConfig>) -> Result<NeuronSet> {
    let s = NeuronSet::load(path)?;
    if let Some(cfg) = cfg {
        s.validate(cfg)?;
    }
    Ok(s)
}

/// Single-file output plus its `.manifest.json` sidecar.
fn write_with_sidecar(out: &Path, bytes: &[u8], manifest: &RunManifest) -> Result<()> {
    write_atomic(out, bytes)?;
    write_atomic(&sidecar_manifest_path(out), manifest.to_json().as_bytes())
}

fn tokens_line(t: &[TokenId]) -> String {
    t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn profile(a: ProfileArgs) -> Result<()> {
    let w = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.corpus, w.config())?;
    if !corpus.uniform_length() {
        eprintln!("warning: contexts have unequal lengths; impacts are not comparable across contexts");
    }
    let manifest = RunManifest::new("profile")
        .param("mode", a.mode)
        .param("select", a.select.to_string())
        .input("model", &a.model)?
        .input("corpus", &a.corpus)?;

    let reports = profile_corpus(&w, &corpus, a.mode)?;
    let set = context_neurons_from_reports(&reports, a.select)?;
    let stage = StagedDir::new(&a.out)?;
    for r in &reports {
        stage.write(&format!("impacts/context_{:04}.csv", r.context_id), r.to_csv().as_bytes())?;
    }
    stage.write("context_neurons.tsv", set.to_tsv().as_bytes())?;
    stage.write("histogram.csv", histogram_csv(&layer_module_histogram(&set, w.config())).as_bytes())?;
    stage.commit(&manifest)?;
    Ok(())
}

pub fn shared(a: SharedArgs) -> Result<()> {
    let sa = load_set(&a.set_a, None)?;
    let sb = load_set(&a.set_b, None)?;
    let manifest = RunManifest::new("shared").input("set_a", &a.set_a)?.input("set_b", &a.set_b)?;
    let stats = overlap_stats(&sa, &sb);
    let mut json = serde_json::to_string_pretty(&stats).expect("stats serialise");
    json.push('\n');
    let stage = StagedDir::new(&a.out)?;
    stage.write("shared.tsv", sa.intersection(&sb).to_tsv().as_bytes())?;
    stage.write("overlap.json", json.as_bytes())?;
    stage.commit(&manifest)?;
    Ok(())
}

pub fn ablate_eval(a: AblateArgs) -> Result<()> {
    let w = load_checkpoint(&a.model)?;
    let cfg = *w.config();
    let corpus = load_corpus(&a.corpus, &cfg)?;
    let mut manifest =
        RunManifest::new("ablate-eval").param("draws", a.draws).input("model", &a.model)?.input("corpus", &a.corpus)?;

    let deact = match &a.set {
        Some(p) => {
            manifest = manifest.input("set", p)?;
            Some(load_set(p, Some(&cfg))?)
        }
        None => None,
    };
    let budget_src = match &a.random_budget_from {
        Some(p) => {
            manifest = manifest.input("random_budget_from", p)?;
            Some(load_set(p, Some(&cfg))?)
        }
        None => None,
    };
    let randoms = match &budget_src {
        Some(b) => {
            if a.draws == 0 {
                return Err(Error::Param("--draws must be >= 1".into()));
            }
            let budget = budget_of(b);
            manifest.seeds = (0..a.draws).map(|j| a.seed.wrapping_add(j as u64)).collect();
            manifest.seeds.iter().map(|&s| random_neuron_set(&budget, &cfg, s)).collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["context_id", "deact", "random_mean"]).expect("in-memory write");
    let mut draws = csv::Writer::from_writer(Vec::new());
    draws.write_record(["context_id", "draw", "delta"]).expect("in-memory write");
    for (i, ctx) in corpus.contexts.iter().enumerate() {
        let d = deact.as_ref().map(|s| output_delta(&w, ctx, s)).transpose()?;
        let rs = randoms.iter().map(|s| output_delta(&w, ctx, s)).collect::<Result<Vec<_>>>()?;
        for (j, v) in rs.iter().enumerate() {
            draws.write_record([i.to_string(), j.to_string(), format!("{v:?}")]).expect("in-memory write");
        }
        let mean = (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64);
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
        summary.write_record([i.to_string(), fmt(d), fmt(mean)]).expect("in-memory write");
    }

    let stage = StagedDir::new(&a.out)?;
    stage.write("deltas.csv", &summary.into_inner().expect("flush"))?;
    if !randoms.is_empty() {
        stage.write("random_draws.csv", &draws.into_inner().expect("flush"))?;
        for (j, s) in randoms.iter().enumerate() {
            stage.write(&format!("random_sets/draw_{j:03}.tsv"), s.to_tsv().as_bytes())?;
        }
    }
    stage.commit(&manifest)?;
    Ok(())
}

pub fn amplify(a: AmplifyArgs) -> Result<()> {
    let w = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.corpus, w.config())?;
    a.neuron.validate(w.config())?;
    let names = a.vocab.as_deref().map(load_vocab).transpose()?;
    let mut manifest = RunManifest::new("amplify")
        .param("neuron", a.neuron.to_string())
        .param("lambda", a.lambda)
        .param("max_new", a.max_new)
        .param("top", a.top)
        .input("model", &a.model)?
        .input("corpus", &a.corpus)?;
    if let Some(v) = &a.vocab {
        manifest = manifest.input("vocab", v)?;
    }

    let prompts: Vec<Vec<TokenId>> = corpus.contexts.iter().map(|c| probe_prompt(c).to_vec()).collect();
    let base = baseline_generate(&w, &prompts, a.max_new)?;
    let amp = amplified_generate(&w, &prompts, a.neuron, a.lambda, a.max_new)?;
    let mut report = token_frequency(&amp, &base, names.as_ref(), a.neuron, a.lambda);
    if let Some(k) = a.top {
        report = report.top(k);
    }
    let lines = |g: &[Vec<TokenId>]| g.iter().map(|t| tokens_line(t) + "\n").collect::<String>();

    let stage = StagedDir::new(&a.out)?;
    stage.write("frequency.csv", report.to_csv().as_bytes())?;
    stage.write("baseline.txt", lines(&base).as_bytes())?;
    stage.write("amplified.txt", lines(&amp).as_bytes())?;
    stage.commit(&manifest)?;
    Ok(())
}

pub fn merge(a: MergeArgs) -> Result<()> {
    if a.method == MergeMethod::Snrf && (a.shared.is_none() || a.rank.is_none()) {
        return Err(Error::Param("snrf merge needs --shared and --rank".into()));
    }
    let src = load_checkpoint(&a.src)?;
    let tgt = load_checkpoint(&a.tgt)?;
    let mut manifest = RunManifest::new("merge")
        .param("method", a.method)
        .param("beta", a.beta)
        .param("allow_beta_override", a.allow_beta_override)
        .input("src", &a.src)?
        .input("tgt", &a.tgt)?;
    let shared = match &a.shared {
        Some(p) => {
            manifest = manifest.input("shared", p)?;
            load_set(p, Some(tgt.config()))?
        }
        None => NeuronSet::new(),
    };
    match a.method {
        MergeMethod::Snrf => manifest = manifest.param("rank", a.rank).param("svd_order", a.svd_order),
        MergeMethod::Dare => manifest = manifest.param("drop_prob", a.drop_prob).seed(a.seed),
        MergeMethod::Linear => {}
    }
    let cfg = MergeConfig {
        rank: a.rank.unwrap_or(DEFAULT_RANK),
        beta: a.beta,
        shared,
        method: a.method,
        dare_drop_prob: a.drop_prob,
        seed: a.seed,
        svd_order: a.svd_order,
        allow_beta_override: a.allow_beta_override,
    };
    let merged = run_merge(&src, &tgt, &cfg)?;
    write_with_sidecar(&a.out, &merged.to_bytes(), &manifest)
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Param(format!("dims must look like ROWSxCOLS, got {s:?}"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

pub fn validate_theory(a: TheoryArgs) -> Result<()> {
    let (rows, cols) = parse_dims(&a.dims)?;
    let cfg = SweepConfig {
        scenarios: a.scenarios,
        rows,
        cols,
        s_size: a.s_size,
        epsilon: a.epsilon,
        eta: a.eta,
        mu_s: a.mu_s,
        mu_perp: a.mu_perp,
        rank: a.rank,
        betas: a.betas.clone(),
        seed: a.seed,
    };
    let manifest = RunManifest::new("validate-theory")
        .param("scenarios", a.scenarios)
        .param("dims", format!("{rows}x{cols}"))
        .param("s_size", a.s_size)
        .param("epsilon", a.epsilon)
        .param("eta", a.eta)
        .param("mu_s", a.mu_s)
        .param("mu_perp", a.mu_perp)
        .param("rank", a.rank)
        .param("betas", &a.betas)
        .seed(a.seed);
    let rows = run_sweep(&cfg)?;
    let s = summarize(&rows);
    write_with_sidecar(&a.out, sweep_csv(&rows).as_bytes(), &manifest)?;
    println!(
        "rows={} gap_holds={} condition_holds={} improvement_holds={} implication_violations={}",
        s.rows, s.gap_holds, s.condition_holds, s.improvement_holds, s.implication_violations
    );
    Ok(())
}

pub fn init(a: InitArgs) -> Result<()> {
    let (w, manifest) = match &a.base {
        Some(base) => {
            let m = RunManifest::new("init").param("noise", a.noise).input("base", base)?.seed(a.seed);
            (load_checkpoint(base)?.perturbed(a.noise, a.seed)?, m)
        }
        None => {
            let cfg = ModelConfig { n_layers: a.layers, d_model: a.d_model, d_inter: a.d_inter, vocab: a.vocab };
            let m = RunManifest::new("init").param("config", cfg).seed(a.seed);
            (WeightMap::random(cfg, a.seed)?, m)
        }
    };
    write_with_sidecar(&a.out, &w.to_bytes(), &manifest)
}
