//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails.
//!
//! The training checks run the full pipeline with `configs/toy.toml` under
//! seeds 1, 2 and 3 and compare median perplexities. Set
//! `ACCEPTANCE_OUT=<dir>` to keep the run artifacts and
//! `ACCEPTANCE_CONFIG=<file>` to train with another config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use infill_core::config::RunConfig;
use infill_core::corpus::{parse_document_with_id, Document};
use infill_core::eval::{ppl_masked, EvalReport, Task};
use infill_core::examples::{build_ilm, read_dataset, BuildOptions, EncodedPair, Strategy};
use infill_core::infill::Template;
use infill_core::masker::{marginal_mask_rate, sample_mask, MaskPolicy};
use infill_core::model::{CausalLm, Checkpoint, ModelConfig, Transformer};
use infill_core::pipeline::{self, Artifacts, Split};
use infill_core::synth;
use infill_core::tokenizer::{train_vocab, Vocab};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy_vocab() -> Vocab {
    train_vocab(synth::stories(400, 0).iter().map(String::as_str), 1000).unwrap().vocab
}

/// Random (document, mask) pairs with at least one blank, drawn from the
/// synthetic corpus under the default policy.
fn random_pairs(docs: &[Document], n: usize) -> Vec<infill_core::masker::MaskedDocument<'_>> {
    let policy = MaskPolicy { rng_seed: 99, ..MaskPolicy::default() };
    let mut out = Vec::new();
    let mut stream = 0u64;
    while out.len() < n {
        let doc = &docs[stream as usize % docs.len()];
        let m = sample_mask(doc, &policy, &mut policy.rng_for(stream));
        if m.k() > 0 {
            out.push(m);
        }
        stream += 1;
    }
    out
}

fn roundtrip() -> Check {
    let vocab = toy_vocab();
    let docs = synth::corpus(1000, 5).map_err(|e| e.to_string())?;
    let pairs = random_pairs(&docs, 2000);
    for m in &pairs {
        let template = Template::from_masked(m);
        let text = template.substitute(&m.answers()).map_err(|e| e.to_string())?;
        ensure(text == m.source.raw, || format!("{}: text substitution differs", m.source.id))?;
        // the rendered form with explicit markers parses back to the same template
        ensure(Template::parse(&template.render()).ok().as_ref() == Some(&template), || {
            format!("{}: rendered template does not parse back", m.source.id)
        })?;
        let pair = EncodedPair::new(m, &vocab).map_err(|e| e.to_string())?;
        let mut tokens = Vec::new();
        let mut answers = pair.answers.iter();
        for &t in &pair.masked {
            if vocab.as_special(t).is_some_and(|s| s.is_blank()) {
                tokens.extend_from_slice(answers.next().ok_or("more blanks than answers")?);
            } else {
                tokens.push(t);
            }
        }
        ensure(tokens == pair.full, || format!("{}: token substitution differs", m.source.id))?;
        let decoded = vocab.decode_bytes(&tokens).map_err(|e| e.to_string())?;
        ensure(decoded == m.source.raw.as_bytes(), || format!("{}: decoded bytes differ", m.source.id))?;
    }
    let blanks: usize = pairs.iter().map(|m| m.k()).sum();
    Ok(format!("{} pairs, {blanks} blanks, 0 failures", pairs.len()))
}

fn overhead(runs: &[Run]) -> Check {
    let vocab = toy_vocab();
    let docs = synth::corpus(1000, 6).map_err(|e| e.to_string())?;
    let opts = BuildOptions { max_seq_len: usize::MAX, ..BuildOptions::default() };
    let mut checked = 0;
    for m in random_pairs(&docs, 2000) {
        let pair = EncodedPair::new(&m, &vocab).map_err(|e| e.to_string())?;
        let ex = build_ilm(&pair, &vocab, &opts).map_err(|e| e.to_string())?;
        let special = ex.tokens.iter().filter(|&&t| vocab.is_special(t)).count();
        let k = m.k();
        ensure(special == 2 * k + 1 && ex.len() - special == pair.full.len(), || {
            format!("{}: {special} special tokens for k={k}", m.source.id)
        })?;
        checked += 1;
    }
    for run in runs {
        let out = Artifacts::new(&run.dir);
        let vocab = Vocab::load(&out.vocab()).map_err(|e| e.to_string())?;
        for split in [Split::Train, Split::Valid] {
            for ex in read_dataset(&out.dataset(split, Strategy::Ilm), &vocab).map_err(|e| e.to_string())? {
                let special = ex.tokens.iter().filter(|&&t| vocab.is_special(t)).count();
                ensure(special == 2 * ex.k + 1, || format!("{}: {special} special tokens for k={}", ex.doc_id, ex.k))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} ILM examples, 0 failures"))
}

/// Exact probability that each word of `doc` lies inside a masked span.
///
/// A word is covered if the document, its paragraph, or its sentence is
/// masked whole, or otherwise by the left-to-right word scan of its
/// sentence. The scan is a Markov chain over the next position to visit:
/// from position i it moves to i+1 (no mask, or a one-word mask) or jumps
/// over an n-gram of length L drawn uniformly from 1..=min(max_ngram, n-i).
fn inclusion_probabilities(doc: &Document, policy: &MaskPolicy) -> Vec<f64> {
    let p = policy.subtree_prob;
    let q = policy.word_vs_ngram_prob;
    let ancestor = 1.0 - (1.0 - p).powi(3);
    let mut out = Vec::new();
    for sentence in doc.sentences() {
        let n = sentence.children.len();
        // reach[i]: probability the scan visits position i
        let mut reach = vec![0.0; n + 1];
        let mut covered = vec![0.0; n];
        reach[0] = 1.0;
        for i in 0..n {
            reach[i + 1] += reach[i] * (1.0 - p + p * q);
            covered[i] += reach[i] * p * q;
            let lmax = policy.max_ngram.min(n - i);
            let each = reach[i] * p * (1.0 - q) / lmax as f64;
            for len in 1..=lmax {
                reach[i + len] += each;
                for c in &mut covered[i..i + len] {
                    *c += each;
                }
            }
        }
        out.extend(covered.iter().map(|c| ancestor + (1.0 - ancestor) * c));
    }
    out
}

fn mask_rate() -> Check {
    let policy = MaskPolicy::default();
    let n_docs = 100_000u64;
    let (mut covered, mut total) = (0usize, 0usize);
    let mut per_doc = Vec::with_capacity(n_docs as usize);
    for i in 0..n_docs {
        let doc = parse_document_with_id(format!("mc-{i}"), &synth::story(11, i), true).map_err(|e| e.to_string())?;
        let m = sample_mask(&doc, &policy, &mut policy.rng_for(i));
        let c = m.masked_word_count();
        let t = doc.word_count();
        per_doc.push((c as f64, t as f64));
        covered += c;
        total += t;
    }
    let rate = covered as f64 / total as f64;
    let mean_t = total as f64 / n_docs as f64;
    let var = per_doc.iter().map(|&(c, t)| (c - rate * t).powi(2)).sum::<f64>() / (n_docs as f64 - 1.0);
    let se = (var / n_docs as f64).sqrt() / mean_t;
    ensure((0.10..=0.20).contains(&rate), || format!("Monte Carlo rate {rate:.4} outside [0.10, 0.20]"))?;

    let fixed = parse_document_with_id("fixed".into(), &synth::story(0, 0), true).map_err(|e| e.to_string())?;
    let probs = inclusion_probabilities(&fixed, &policy);
    let exact = probs.iter().sum::<f64>() / probs.len() as f64;
    let est = marginal_mask_rate(std::slice::from_ref(&fixed), &policy, 200_000, |_| 1).map_err(|e| e.to_string())?;
    let z = (est.rate - exact) / est.std_err;
    ensure(z.abs() <= 3.0, || format!("fixed tree: exact {exact:.5} vs estimate {:.5} ({z:+.2} SE)", est.rate))?;
    Ok(format!(
        "rate {rate:.4} ± {se:.4} over {n_docs} documents; fixed tree exact {exact:.5} vs {:.5} ± {:.5} ({z:+.2} SE)",
        est.rate, est.std_err
    ))
}

struct Run {
    seed: u64,
    dir: PathBuf,
    report: EvalReport,
}

fn toy_config() -> RunConfig {
    let path = std::env::var_os("ACCEPTANCE_CONFIG")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml"));
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn train_runs(root: &Path) -> Result<Vec<Run>, String> {
    let base = toy_config();
    let mut runs = Vec::new();
    for seed in [1, 2, 3] {
        let cfg = RunConfig { seed, ..base.clone() };
        let dir = root.join(format!("seed-{seed}"));
        let started = Instant::now();
        let report = pipeline::run_all(&cfg, &Artifacts::new(&dir), |_, _| {}).map_err(|e| e.to_string())?;
        println!("seed {seed}: trained and evaluated in {:.0}s", started.elapsed().as_secs_f64());
        print!("{}", report.to_table());
        runs.push(Run { seed, dir, report });
    }
    Ok(runs)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn median_ppl(runs: &[Run], task: Task, strategy: Strategy) -> Result<f64, String> {
    let xs = runs
        .iter()
        .map(|r| r.report.get(task, strategy).map(|row| row.ppl).ok_or_else(|| format!("no {task:?}/{strategy} row")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(median(xs))
}

fn orderings(runs: &[Run]) -> Check {
    let ppl = |s| median_ppl(runs, Task::Sentence, s);
    let (ilm, lm, lmrev, lmall) = (ppl(Strategy::Ilm)?, ppl(Strategy::Lm)?, ppl(Strategy::LmRev)?, ppl(Strategy::LmAll)?);
    let detail = format!("median sentence PPL ILM {ilm:.3}, LM {lm:.3}, LMREV {lmrev:.3}, LMALL {lmall:.3}");
    ensure(ilm < lm && ilm < lmrev && (ilm.ln() - lmall.ln()).abs() <= 1.3f64.ln(), || detail.clone())?;
    Ok(detail)
}

fn retention(runs: &[Run]) -> Check {
    let ilm = median_ppl(runs, Task::Document, Strategy::Ilm)?;
    let lm = median_ppl(runs, Task::Document, Strategy::Lm)?;
    let detail = format!("median document PPL ILM {ilm:.3}, LM {lm:.3}, ratio {:.3}", ilm / lm);
    ensure((ilm.ln() - lm.ln()).abs() <= 1.3f64.ln(), || detail.clone())?;
    Ok(detail)
}

fn lengths(runs: &[Run]) -> Check {
    let mut detail = Vec::new();
    for run in runs {
        let len = |s| run.report.get(Task::Mixture, s).map(|r| r.mean_relative_length).ok_or("no mixture row");
        let (ilm, lm, lmrev, lmall) = (len(Strategy::Ilm)?, len(Strategy::Lm)?, len(Strategy::LmRev)?, len(Strategy::LmAll)?);
        let line = format!("seed {}: ILM {ilm:.4}, LM {lm}, LMREV {lmrev}, LMALL {lmall:.4}", run.seed);
        ensure(ilm <= 1.10 && lmall > 1.5 && lmall <= 2.0 && lm == 1.0 && lmrev == 1.0, || line.clone())?;
        detail.push(line);
    }
    Ok(detail.join("; "))
}

fn randomized(config: ModelConfig, seed: u64) -> Transformer<f64> {
    let mut m = Transformer::<f64>::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let infos = m.layout().tensors().to_vec();
    for info in infos {
        let gain = info.name.ends_with(".g");
        for p in &mut m.params_mut()[info.range()] {
            let r: f64 = rng.random_range(-0.5..0.5);
            *p = if gain { 1.0 + r } else { r };
        }
    }
    m
}

fn model_correctness(runs: &[Run]) -> Check {
    let run = runs.first().ok_or("no trained run")?;
    let out = Artifacts::new(&run.dir);
    let vocab = Vocab::load(&out.vocab()).map_err(|e| e.to_string())?;
    let ckpt_path = out.checkpoint(Strategy::Ilm);
    let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| e.to_string())?;
    let model = ckpt.to_model().map_err(|e| e.to_string())?;

    // causal leakage on the trained model
    let docs = pipeline::load_split(&out, "acceptance", Split::Test).map_err(|e| e.to_string())?;
    let base: Vec<u32> = vocab.encode(&docs[0].raw).map_err(|e| e.to_string())?.into_iter().take(48).collect();
    let v = vocab.size();
    let reference = model.log_probs(&base).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for j in 0..base.len() {
        let mut ids = base.clone();
        ids[j] = rng.random_range(0..v as u32);
        let lp = model.log_probs(&ids).map_err(|e| e.to_string())?;
        ensure(lp[..j * v].iter().zip(&reference[..j * v]).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("changing position {j} moved an earlier prediction")
        })?;
    }

    // finite differences at f64
    let cfg = ModelConfig { vocab_size: 11, n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, max_seq_len: 16, bos_token: 0, ..model.config().clone() };
    let mut m = randomized(cfg, 21);
    let input = [0u32, 5, 2, 8, 10, 1, 3];
    let targets = [5u32, 2, 8, 10, 1, 3, 4];
    let w = [0.3, 1.0, 0.0, 0.5, 1.0, 0.2, 0.7];
    let mut grads = vec![0.0; m.num_params()];
    m.loss_and_grad(&input, &targets, &w, &mut grads, None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let h = 1e-5;
    for i in 0..m.num_params() {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + h;
        let up = m.loss(&input, &targets, &w).unwrap();
        m.params_mut()[i] = orig - h;
        let down = m.loss(&input, &targets, &w).unwrap();
        m.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(1e-6));
    }
    ensure(worst < 1e-3, || format!("gradient relative error {worst:.2e}"))?;

    // uniform model on real evaluation examples
    let mut uniform = Transformer::<f64>::new(model.config().clone()).map_err(|e| e.to_string())?;
    let head = uniform.layout().head_range();
    uniform.params_mut()[head].iter_mut().for_each(|p| *p = 0.0);
    let examples = read_dataset(&out.dataset(Split::Valid, Strategy::Ilm), &vocab).map_err(|e| e.to_string())?;
    let ppl = ppl_masked(&uniform as &dyn CausalLm, &examples).map_err(|e| e.to_string())?;
    let uniform_err = (ppl - v as f64).abs() / v as f64;
    ensure(uniform_err < 1e-12, || format!("uniform PPL {ppl} for vocabulary {v}"))?;

    // checkpoint bit identity
    let resaved = run.dir.join("resaved.bin");
    ckpt.save(&resaved).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&ckpt_path).ok() == std::fs::read(&resaved).ok(), || "re-saved checkpoint bytes differ".into())?;
    let reloaded = Checkpoint::load(&resaved).and_then(|c| c.to_model()).map_err(|e| e.to_string())?;
    ensure(model.params().iter().zip(reloaded.params()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
        "reloaded parameters differ".into()
    })?;
    Ok(format!(
        "no leakage over {} positions; gradient max rel err {worst:.1e} over {} params; uniform PPL {ppl} (V = {v}, rel err {uniform_err:.1e}); checkpoint bit-identical",
        base.len(),
        m.num_params()
    ))
}

const SMALL: &str = r#"
version = 1
name = "small"
seed = 4

[corpus]
kind = "synthetic"
n_docs = 100

[vocab]
target_size = 1000

[examples]
masks_per_doc = 2

[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
max_seq_len = 256
dropout = 0.1

[train]
batch_size = 4
max_steps = 30
warmup_steps = 5
eval_every = 10
"#;

fn determinism(root: &Path) -> Check {
    let cfg = RunConfig::parse(SMALL, root).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = Artifacts::new(root.join(format!("determinism-{name}")));
        pipeline::run_all(&cfg, &out, |_, _| {}).map_err(|e| e.to_string())?;
        let json = std::fs::read(out.report_json()).map_err(|e| e.to_string())?;
        let txt = std::fs::read(out.report_txt()).map_err(|e| e.to_string())?;
        outputs.push((json, txt));
    }
    ensure(outputs[0] == outputs[1], || "eval reports differ between runs".into())?;
    Ok(format!("report.json ({} bytes) and report.txt identical across two runs", outputs[0].0.len()))
}

fn main() -> ExitCode {
    let keep = std::env::var_os("ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());

    let runs = train_runs(&root);
    let (runs, train_error) = match runs {
        Ok(r) => (r, None),
        Err(e) => (Vec::new(), Some(e)),
    };
    let trained = |f: fn(&[Run]) -> Check| match &train_error {
        Some(e) => Err(format!("training failed: {e}")),
        None => f(&runs),
    };

    let results: Vec<(&str, Check)> = vec![
        ("roundtrip exactness", roundtrip()),
        ("ILM overhead is 2k+1", overhead(&runs)),
        ("marginal mask rate", mask_rate()),
        ("sentence PPL orderings", trained(orderings)),
        ("document PPL retention", trained(retention)),
        ("relative lengths", trained(lengths)),
        ("model correctness", trained(model_correctness)),
        ("end-to-end determinism", determinism(&root)),
    ];
    let mut failed = 0;
    for (i, (name, result)) in results.iter().enumerate() {
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
