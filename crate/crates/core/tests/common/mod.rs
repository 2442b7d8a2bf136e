//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;
use std::sync::{Mutex, MutexGuard};

use nestgraph::corpus::{build_vocabs, Sentence};
use nestgraph::detectors::{Boundary, Estimator};
use nestgraph::encoder::{EncoderBank, EncoderDims, TokenIds};
use nestgraph::generator::Generator;
use nestgraph::hypergraph::Tag;
use nestgraph::nn::gradcheck::{check_graph, relative_error, straddles_kink, FD_STEP};
use nestgraph::nn::{Activation, BiLstm, Ffn, Graph, LrGroup, LstmCell, ParamStore, Tensor, Var};
use nestgraph::pipeline::{joint_loss, Example, Model, ModelConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Coordinates checked per parameter in each gradient trial.
pub const COORDS_PER_PARAM: usize = 4;

static HEAVY: Mutex<()> = Mutex::new(());

/// Serializes tests whose wall clock matters.
pub fn heavy_lock() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to stdout so the line shows even when output is captured.
pub fn report(criterion: usize, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion:>2} [{verdict}] {title}: {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

pub fn small_dims() -> EncoderDims {
    EncoderDims {
        d_lm: 3,
        d_w: 3,
        d_pos: 2,
        d_char: 4,
        char_emb: 3,
        hidden: 3,
    }
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        encoder: small_dims(),
        ffn_hidden: 5,
        ..Default::default()
    }
}

pub fn sentence(tokens: &[&str], entities: &[(usize, usize, &str)]) -> Sentence {
    let raw = entities
        .iter()
        .map(|&(start, end, label)| nestgraph::corpus::RawEntity {
            start,
            end,
            label: label.to_string(),
        })
        .collect();
    Sentence::new(tokens.iter().map(|t| t.to_string()).collect(), None, raw).unwrap()
}

pub fn toy_corpus() -> Vec<Sentence> {
    vec![
        sentence(
            &["the", "new", "york", "times", "said"],
            &[(1, 3, "ORG"), (1, 2, "GPE")],
        ),
        sentence(&["bob", "left"], &[(0, 0, "PER")]),
        sentence(&["it", "rained"], &[]),
    ]
}

fn random_param(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> nestgraph::nn::ParamId {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store
        .add(
            name,
            Tensor::matrix(rows, cols, data).unwrap(),
            LrGroup::Other,
        )
        .unwrap()
}

/// Fixed random readout `Σ r ⊙ y`, so every output coordinate matters.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let r = g.input(Tensor::new(shape, data).unwrap());
    let p = g.mul(y, r).unwrap();
    g.sum_all(p)
}

/// Worst relative error of a trial and the number of coordinates skipped
/// at non-differentiable points.
pub type Trial = (f64, usize);

fn run(
    store: &mut ParamStore,
    seed: u64,
    build: impl Fn(&mut Graph) -> nestgraph::Result<Var>,
) -> Trial {
    let r = check_graph(store, build, Some(COORDS_PER_PARAM), seed).unwrap();
    (r.max_rel_error, r.kinks)
}

pub fn grad_ffn(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ffn = Ffn::new(
        &mut store,
        &mut rng,
        "ffn",
        4,
        6,
        3,
        Activation::Tanh,
        LrGroup::Other,
    )
    .unwrap();
    let relu = Ffn::new(
        &mut store,
        &mut rng,
        "relu",
        3,
        5,
        2,
        Activation::Relu,
        LrGroup::Other,
    )
    .unwrap();
    let x = random_param(&mut store, &mut rng, "x", 3, 4);
    run(&mut store, seed, |g| {
        let xv = g.param(x);
        let h = ffn.forward(g, xv)?;
        let y = relu.forward(g, h)?;
        Ok(readout(g, y, seed))
    })
}

pub fn grad_lstm_step(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, &mut rng, "cell", 4, 3, LrGroup::Other).unwrap();
    let x = random_param(&mut store, &mut rng, "x", 1, 4);
    let c0 = random_param(&mut store, &mut rng, "c0", 1, 3);
    let h0 = random_param(&mut store, &mut rng, "h0", 1, 3);
    run(&mut store, seed, |g| {
        let xv = g.param(x);
        let xp = cell.project(g, xv)?;
        let (c, h) = (g.param(c0), g.param(h0));
        let y = cell.run_projected(g, xp, c, h, false)?;
        Ok(readout(g, y, seed))
    })
}

pub fn grad_bilstm(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bi = BiLstm::new(&mut store, &mut rng, "bi", 3, 3, LrGroup::Other).unwrap();
    let len = 1 + (seed % 5) as usize;
    let x = random_param(&mut store, &mut rng, "x", len, 3);
    run(&mut store, seed, |g| {
        let xv = g.param(x);
        let y = bi.forward(g, xv)?;
        let s = bi.summary(g, xv)?;
        let a = readout(g, y, seed);
        let b = readout(g, s, seed + 1);
        g.weighted_sum(&[(a, 1.0), (b, 0.5)])
    })
}

pub fn grad_encoders(seed: u64) -> Trial {
    let sents = toy_corpus();
    let vocabs = build_vocabs(&sents, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = EncoderBank::new(&mut store, &mut rng, small_dims(), &vocabs).unwrap();
    let ids: Vec<TokenIds> = sents.iter().map(|s| TokenIds::new(s, &vocabs)).collect();
    let which = (seed % 3) as usize;
    run(&mut store, seed, |g| {
        let batch = [&ids[which], &ids[(which + 1) % 3]];
        let mut terms = Vec::new();
        for (k, enc) in [&bank.start, &bank.end, &bank.query, &bank.content]
            .into_iter()
            .enumerate()
        {
            for (i, y) in enc.encode_batch(g, &batch)?.into_iter().enumerate() {
                terms.push((readout(g, y, seed + (4 * i + k) as u64), 1.0));
            }
        }
        g.weighted_sum(&terms)
    })
}

pub fn grad_estimator_loss(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let est = Estimator::new(&mut store, &mut rng, Boundary::End, 4, 5).unwrap();
    let x = random_param(&mut store, &mut rng, "x", 6, 4);
    let labels: Vec<f64> = (0..6)
        .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
        .collect();
    let gamma = rng.gen_range(0.0..2.0);
    run(&mut store, seed, |g| {
        let xv = g.param(x);
        let p = est.forward(g, xv)?;
        g.focal_loss(p, &labels, gamma)
    })
}

pub fn grad_generator_loss(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let n_classes = 2;
    let gen = Generator::new(&mut store, &mut rng, 4, 5, n_classes).unwrap();
    let len = 6;
    let content = random_param(&mut store, &mut rng, "content", len, 4);
    let query = random_param(&mut store, &mut rng, "query", len, 4);
    let mut plans = Vec::new();
    for _ in 0..3 {
        let start = rng.gen_range(0..len);
        let steps = rng.gen_range(1..=len - start);
        let tags: Vec<Tag> = (0..steps)
            .map(|_| {
                Tag::from_index(rng.gen_range(0..Tag::alphabet_size(n_classes)), n_classes).unwrap()
            })
            .collect();
        plans.push((start, tags));
    }
    run(&mut store, seed, |g| {
        let c = g.param(content);
        let proj = gen.project_content(g, c)?;
        let q = g.param(query);
        let mut cands = Vec::new();
        for (start, tags) in &plans {
            let row = g.rows(q, *start, 1)?;
            cands.push(nestgraph::generator::Candidate {
                content_proj: proj,
                start: *start,
                query: row,
                gold: tags,
            });
        }
        Ok(gen.batch_loss(g, &cands)?.expect("candidates"))
    })
}

/// The joint loss mixes heads with large gradients and deep encoder
/// weights whose single-coordinate derivatives (about 1e-7 on a loss near
/// 12) sit below what central differences with h = 1e-5 can resolve.
/// Head tensors are checked coordinate by coordinate; each encoder tensor is
/// checked along the direction `sign(∂L/∂θ)` restricted to that tensor,
/// which turns many small coordinates into one well-conditioned derivative.
pub fn grad_joint_loss(seed: u64) -> Trial {
    let sents = toy_corpus();
    let mut model = Model::new(
        small_model_config(),
        TrainConfig::default(),
        build_vocabs(&sents, 1),
        seed,
    )
    .unwrap();
    let ex = model.prepare(&sents, None).unwrap();
    let batch: Vec<&Example> = ex.iter().collect();
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        model
            .store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    // Start scores far above 0.5 make every token a candidate under any
    // finite-difference nudge, so the sampled set stays fixed.
    let bias = model.start_estimator.ffn.second.b;
    model.store.value_mut(bias).data_mut()[0] = 4.0;
    let mut store = std::mem::take(&mut model.store);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let l = joint_loss(&model, &mut g, &batch, &config).unwrap().total;
        g.value(l).item()
    };
    let mut grads = store.zero_grads();
    {
        let mut g = Graph::new(&store);
        let l = joint_loss(&model, &mut g, &batch, &config).unwrap().total;
        g.backward(l, &mut grads);
    }
    let center = eval(&store);
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for id in ids {
        let name = store.get(id).name.clone();
        let grad = grads.get(id).to_vec();
        let head = ["start_estimator", "end_estimator", "generator"]
            .iter()
            .any(|p| name.starts_with(p));
        let directions: Vec<Vec<f64>> = if head {
            let len = grad.len();
            let picks =
                rand::seq::index::sample(&mut rng, len, COORDS_PER_PARAM.min(len)).into_vec();
            picks
                .into_iter()
                .map(|c| (0..len).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
                .collect()
        } else {
            vec![grad
                .iter()
                .map(|&d| if d < 0.0 { -1.0 } else { 1.0 })
                .collect()]
        };
        for v in directions {
            let orig = store.value(id).data().to_vec();
            let shift = |store: &mut ParamStore, sign: f64| {
                for ((x, o), d) in store.value_mut(id).data_mut().iter_mut().zip(&orig).zip(&v) {
                    *x = o + sign * FD_STEP * d;
                }
            };
            shift(&mut store, 1.0);
            let up = eval(&store);
            shift(&mut store, -1.0);
            let down = eval(&store);
            store.value_mut(id).data_mut().copy_from_slice(&orig);
            if straddles_kink(down, center, up, FD_STEP) {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic: f64 = grad.iter().zip(&v).map(|(a, b)| a * b).sum();
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    (worst, kinks)
}
