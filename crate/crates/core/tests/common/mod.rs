//! Loop oracles and randomized check suites shared by the loss tests and the
//! acceptance target.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use eln_autograd::{Graph, Tensor};
use eln_core::losses::{
    self, build_contrastive_index, BinaryMap, ContrastiveConfig, ContrastiveIndex,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const LOSS_NAMES: [&str; 7] =
    ["ce_loss", "sup_loss", "aux_loss", "weighted_bce", "eln_loss", "pseudo_loss", "contrastive_loss"];

#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Dims {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn random(r: &mut ChaCha8Rng) -> Self {
        let side = r.random_range(2..=8);
        Self { b: r.random_range(1..=2), c: r.random_range(2..=4), h: side, w: side, d: r.random_range(2..=8) }
    }
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn labels(r: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..c)).collect()
}

pub fn bits(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<u8> {
    (0..n).map(|_| u8::from(r.random_bool(p))).collect()
}

// ---- oracles -------------------------------------------------------------

fn at(x: &[f64], dims: Dims, c: usize, b: usize, ch: usize, p: usize) -> f64 {
    x[(b * c + ch) * dims.hw() + p]
}

/// `-ln softmax(z)[y]` at one pixel, evaluated directly.
pub fn pixel_nll(logits: &[f64], dims: Dims, b: usize, p: usize, y: usize) -> f64 {
    let mut denom = 0.0;
    for ch in 0..dims.c {
        denom += at(logits, dims, dims.c, b, ch, p).exp();
    }
    -(at(logits, dims, dims.c, b, y, p).exp() / denom).ln()
}

pub fn ce_image_oracle(logits: &[f64], dims: Dims, labels: &[usize], b: usize) -> f64 {
    let hw = dims.hw();
    let mut total = 0.0;
    for p in 0..hw {
        total += pixel_nll(logits, dims, b, p, labels[b * hw + p]);
    }
    total / hw as f64
}

pub fn ce_oracle(logits: &[f64], dims: Dims, labels: &[usize]) -> f64 {
    let hw = dims.hw();
    let mut total = 0.0;
    for b in 0..dims.b {
        for p in 0..hw {
            total += pixel_nll(logits, dims, b, p, labels[b * hw + p]);
        }
    }
    total / (dims.b * hw) as f64
}

pub fn sup_oracle(logits: &[f64], dims: Dims, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for b in 0..dims.b {
        total += ce_image_oracle(logits, dims, labels, b);
    }
    total / dims.b as f64
}

pub fn aux_oracle(main: &[f64], aux: &[Vec<f64>], dims: Dims, labels: &[usize], alphas: &[f64]) -> f64 {
    let mut total = 0.0;
    for b in 0..dims.b {
        let m = ce_image_oracle(main, dims, labels, b);
        for (k, a) in aux.iter().enumerate() {
            let ce = ce_image_oracle(a, dims, labels, b);
            if ce > alphas[k] * m {
                total += ce;
            }
        }
    }
    total / dims.b as f64
}

pub fn wbce_oracle(z: &[f64], b: usize, hw: usize, mask: &[u8]) -> f64 {
    let mut total = 0.0;
    for img in 0..b {
        let ones = (0..hw).filter(|&p| mask[img * hw + p] == 1).count();
        let zeros = hw - ones;
        let weight = if ones == 0 { 1.0 } else if zeros == 0 { 0.0 } else { ones as f64 / zeros as f64 };
        let mut sum = 0.0;
        for p in 0..hw {
            let prob = 1.0 / (1.0 + (-z[img * hw + p]).exp());
            if mask[img * hw + p] == 1 {
                sum += -prob.ln();
            } else {
                sum += -weight * (1.0 - prob).ln();
            }
        }
        total += sum / hw as f64;
    }
    total / b as f64
}

pub fn eln_oracle(zs: &[Vec<f64>], b: usize, hw: usize, masks: &[Vec<u8>]) -> f64 {
    let mut total = 0.0;
    for (z, m) in zs.iter().zip(masks) {
        total += wbce_oracle(z, b, hw, m);
    }
    total / zs.len() as f64
}

pub fn pseudo_oracle(logits: &[f64], dims: Dims, pseudo: &[usize], validity: &[f64]) -> f64 {
    let hw = dims.hw();
    let mut total = 0.0;
    let mut valid = 0usize;
    for b in 0..dims.b {
        for p in 0..hw {
            if validity[b * hw + p].round() >= 1.0 {
                valid += 1;
                total += pixel_nll(logits, dims, b, p, pseudo[b * hw + p]);
            }
        }
    }
    total / valid.max(1) as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Rows are `[M, D]` row-major.
pub fn contrastive_rows_oracle(student: &[f64], teacher: &[f64], d: usize, idx: &ContrastiveIndex, tau: f64) -> f64 {
    if idx.anchors.is_empty() {
        return 0.0;
    }
    let row = |x: &[f64], i: usize| x[i * d..(i + 1) * d].to_vec();
    let mut total = 0.0;
    for (a, &i) in idx.anchors.iter().enumerate() {
        let fi = row(student, i);
        let mut neg = 0.0;
        for &k in &idx.negatives[a] {
            neg += (cosine(&fi, &row(teacher, k)) / tau).exp();
        }
        for &j in &idx.positives[a] {
            let pos = (cosine(&fi, &row(teacher, j)) / tau).exp();
            total += (pos / (pos + neg)).ln();
        }
    }
    -total / idx.anchors.len() as f64
}

/// `[B,D,h,w]` to `[B*h*w, D]` by explicit loops.
pub fn rows_of(x: &[f64], dims: Dims) -> Vec<f64> {
    let hw = dims.hw();
    let mut out = vec![0.0; x.len()];
    for b in 0..dims.b {
        for ch in 0..dims.d {
            for p in 0..hw {
                out[(b * hw + p) * dims.d + ch] = x[(b * dims.d + ch) * hw + p];
            }
        }
    }
    out
}

// ---- suites --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub worst: f64,
    pub elapsed: Duration,
}

// The floor only matters for losses that are exactly zero (e.g. a
// contrastive batch with a single class), where f64 round-off is ~1e-17.
fn rel_err(actual: f64, expected: f64) -> f64 {
    if actual == expected {
        return 0.0;
    }
    (actual - expected).abs() / expected.abs().max(1e-9)
}

fn t4(dims: Dims, c: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[dims.b, c, dims.h, dims.w], data).unwrap()
}

/// A random instance of one loss: its analytic value as a function of the
/// differentiated input, plus the oracle value at the base point.
/// Loss value and gradient at a point of the differentiated input.
pub type EvalFn = Box<dyn Fn(&[f64]) -> (f64, Vec<f64>)>;

pub struct LossCase {
    pub input: Vec<f64>,
    pub eval: EvalFn,
    pub oracle: f64,
}

/// Alphas far enough from every image's CE ratio that a 1e-3 nudge cannot
/// flip a gate.
fn safe_alphas(r: &mut ChaCha8Rng, main: &[f64], aux: &[Vec<f64>], dims: Dims, labels: &[usize]) -> Option<Vec<f64>> {
    let mut alphas = Vec::new();
    for a in aux {
        let alpha = r.random_range(0.5..2.0);
        for b in 0..dims.b {
            let m = ce_image_oracle(main, dims, labels, b);
            let ce = ce_image_oracle(a, dims, labels, b);
            if (ce - alpha * m).abs() < 0.02 {
                return None;
            }
        }
        alphas.push(alpha);
    }
    Some(alphas)
}

pub fn make_case(name: &str, r: &mut ChaCha8Rng) -> LossCase {
    let dims = Dims::random(r);
    let n = dims.b * dims.hw();
    match name {
        "ce_loss" | "sup_loss" => {
            let logits = uniform(r, n * dims.c, -3.0, 3.0);
            let y = labels(r, n, dims.c);
            let oracle = if name == "ce_loss" { ce_oracle(&logits, dims, &y) } else { sup_oracle(&logits, dims, &y) };
            let sup = name == "sup_loss";
            let eval = Box::new(move |x: &[f64]| {
                let g = Graph::<f64>::new();
                let v = g.param(t4(dims, dims.c, x.to_vec()));
                let (l, _) = if sup { losses::sup_loss(v, &y).unwrap() } else { losses::ce_loss(v, &y).unwrap() };
                let grads = g.backward(l).unwrap();
                (l.value().item(), grads.get(v).unwrap().data().to_vec())
            });
            LossCase { input: logits, eval, oracle }
        }
        "aux_loss" => loop {
            let k = r.random_range(1..=3);
            let main = uniform(r, n * dims.c, -3.0, 3.0);
            let aux: Vec<Vec<f64>> = (0..k).map(|_| uniform(r, n * dims.c, -3.0, 3.0)).collect();
            let y = labels(r, n, dims.c);
            let Some(alphas) = safe_alphas(r, &main, &aux, dims, &y) else { continue };
            let oracle = aux_oracle(&main, &aux, dims, &y, &alphas);
            // differentiate through the first auxiliary decoder's logits
            let input = aux[0].clone();
            let eval = Box::new(move |x: &[f64]| {
                let g = Graph::<f64>::new();
                let m = g.param(t4(dims, dims.c, main.clone()));
                let first = g.param(t4(dims, dims.c, x.to_vec()));
                let mut vars = vec![first];
                vars.extend(aux[1..].iter().map(|a| g.param(t4(dims, dims.c, a.clone()))));
                let (l, _) = losses::aux_loss(m, &vars, &y, &alphas).unwrap();
                let mut grads = g.backward(l).unwrap();
                let gx = grads.take(first).map(|t| t.into_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
                (l.value().item(), gx)
            });
            break LossCase { input, eval, oracle };
        },
        "weighted_bce" => {
            let z = uniform(r, n, -3.0, 3.0);
            let p = r.random_range(0.1..0.9);
            let mut mask = bits(r, n, p);
            if r.random_bool(0.15) {
                // exercise the all-zero fallback on the first image
                mask[..dims.hw()].fill(0);
            }
            let oracle = wbce_oracle(&z, dims.b, dims.hw(), &mask);
            let map = BinaryMap::new(dims.b, dims.h, dims.w, mask).unwrap();
            let eval = Box::new(move |x: &[f64]| {
                let g = Graph::<f64>::new();
                let v = g.param(t4(dims, 1, x.to_vec()));
                let (l, _) = losses::weighted_bce(v, &map).unwrap();
                let grads = g.backward(l).unwrap();
                (l.value().item(), grads.get(v).unwrap().data().to_vec())
            });
            LossCase { input: z, eval, oracle }
        }
        "eln_loss" => {
            let k = r.random_range(1..=4);
            let zs: Vec<Vec<f64>> = (0..k).map(|_| uniform(r, n, -3.0, 3.0)).collect();
            let masks: Vec<Vec<u8>> = (0..k).map(|_| bits(r, n, 0.7)).collect();
            let oracle = eln_oracle(&zs, dims.b, dims.hw(), &masks);
            let maps: Vec<BinaryMap> =
                masks.iter().map(|m| BinaryMap::new(dims.b, dims.h, dims.w, m.clone()).unwrap()).collect();
            let input = zs[0].clone();
            let eval = Box::new(move |x: &[f64]| {
                let g = Graph::<f64>::new();
                let first = g.param(t4(dims, 1, x.to_vec()));
                let mut vars = vec![first];
                vars.extend(zs[1..].iter().map(|z| g.param(t4(dims, 1, z.clone()))));
                let (l, _) = losses::eln_loss(&vars, &maps).unwrap();
                let grads = g.backward(l).unwrap();
                (l.value().item(), grads.get(first).unwrap().data().to_vec())
            });
            LossCase { input, eval, oracle }
        }
        "pseudo_loss" => {
            let logits = uniform(r, n * dims.c, -3.0, 3.0);
            let y = labels(r, n, dims.c);
            let mut validity = uniform(r, n, 0.0, 1.0);
            if r.random_bool(0.1) {
                validity.iter_mut().for_each(|v| *v *= 0.4);
            }
            let oracle = pseudo_oracle(&logits, dims, &y, &validity);
            let vt = t4(dims, 1, validity);
            let eval = Box::new(move |x: &[f64]| {
                let g = Graph::<f64>::new();
                let v = g.param(t4(dims, dims.c, x.to_vec()));
                let (l, _) = losses::pseudo_loss(v, &y, &vt).unwrap();
                let mut grads = g.backward(l).unwrap();
                let gx = grads.take(v).map(|t| t.into_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
                (l.value().item(), gx)
            });
            LossCase { input: logits, eval, oracle }
        }
        "contrastive_loss" => {
            let student = uniform(r, n * dims.d, -1.0, 1.0);
            let teacher = uniform(r, n * dims.d, -1.0, 1.0);
            let y = labels(r, n, dims.c);
            let valid: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
            let cfg = ContrastiveConfig {
                temperature: r.random_range(0.2..1.0),
                max_anchors: r.random_range(4..40),
                max_positives: r.random_range(2..12),
                max_negatives: r.random_range(2..40),
                seed: r.random(),
            };
            let step: u64 = r.random();
            // the index the loss samples internally, rebuilt from the same stream
            let mut stream = eln_core::rng::stream(&[eln_core::rng::tag::CONTRASTIVE, cfg.seed, step]);
            let idx = build_contrastive_index(&y, &valid, &cfg, &mut stream).unwrap();
            let oracle =
                contrastive_rows_oracle(&rows_of(&student, dims), &rows_of(&teacher, dims), dims.d, &idx, cfg.temperature);
            let tt = t4(dims, dims.d, teacher);
            let eval = Box::new(move |x: &[f64]| {
                let g = Graph::<f64>::new();
                let v = g.param(t4(dims, dims.d, x.to_vec()));
                let (l, _) = losses::contrastive_loss(v, &tt, &y, &valid, &cfg, step).unwrap();
                let mut grads = g.backward(l).unwrap();
                let gx = grads.take(v).map(|t| t.into_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
                (l.value().item(), gx)
            });
            LossCase { input: student, eval, oracle }
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Loss value vs loop oracle on `instances` random cases.
pub fn oracle_suite(name: &'static str, instances: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let case = make_case(name, &mut r);
        let (value, _) = (case.eval)(&case.input);
        worst = worst.max(rel_err(value, case.oracle));
    }
    SuiteReport { name, checks: instances, worst, elapsed: start.elapsed() }
}

/// Relative disagreement between analytic and central-difference gradients.
pub fn fd_rel(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences with `step` on `coords_per_case` random coordinates
/// of `cases` random instances.
pub fn gradient_suite(name: &'static str, cases: usize, coords_per_case: usize, step: f64, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..cases {
        let case = make_case(name, &mut r);
        let (_, grad) = (case.eval)(&case.input);
        for _ in 0..coords_per_case {
            let i = r.random_range(0..case.input.len());
            let mut x = case.input.clone();
            x[i] += step;
            let (up, _) = (case.eval)(&x);
            x[i] -= 2.0 * step;
            let (down, _) = (case.eval)(&x);
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(fd_rel(grad[i], numeric));
            checks += 1;
        }
    }
    SuiteReport { name, checks, worst, elapsed: start.elapsed() }
}

/// A configuration small enough to run every stage in well under a second.
pub fn tiny_experiment(out: &std::path::Path) -> eln_core::experiment::ExperimentConfig {
    use eln_core::experiment::{ExperimentConfig, StageLengths};
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic.height = 16;
    cfg.data.synthetic.width = 16;
    cfg.data.synthetic.num_classes = 3;
    cfg.data.train_images = 8;
    cfg.data.validation_images = 4;
    cfg.split_ratio = 0.25;
    cfg.seeds = vec![0];
    cfg.model.num_classes = 3;
    cfg.model.embedding_dim = 4;
    cfg.model.encoder_widths = [4, 4, 8];
    cfg.model.decoder_width = 4;
    cfg.model.eln_widths = [4, 4];
    cfg.train.optim.learning_rate = 1e-3;
    cfg.train.optim.labeled_batch = 2;
    cfg.train.optim.unlabeled_batch = 2;
    cfg.stages = StageLengths { pretrain: 4, stage1: 4, stage2: 4 };
    cfg.eval_every = 2;
    cfg.checkpoint_every = 2;
    cfg.output_dir = out.to_path_buf();
    cfg.ablation = vec!["method:eln".into(), "mask:none".into()];
    cfg
}
