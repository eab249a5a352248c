//! Oracles shared by the integration tests. Nothing here calls into the
//! library's own loss or clustering code.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All partitions of `0..n` into exactly `k` non-empty blocks, as restricted
/// growth strings (block ids appear in order of first use).
pub fn set_partitions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, used: usize, n: usize, k: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            if used == k {
                out.push(prefix.clone());
            }
            return;
        }
        let remaining = n - prefix.len();
        if used + remaining < k {
            return;
        }
        for b in 0..=used.min(k - 1) {
            prefix.push(b);
            grow(prefix, used.max(b + 1), n, k, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), 0, n, k, &mut out);
    out
}

/// `-sum_k intra_mean_k / (inter_mean_k + eps)` by plain loops over a dense
/// matrix; `-intra_mean` when there is one block.
pub fn objective(s: &[Vec<f64>], group_of: &[usize], k: usize, eps: f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for g in 0..k {
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0.0, 0.0, 0.0);
        for i in (0..n).filter(|&i| group_of[i] == g) {
            for j in 0..n {
                if group_of[j] == g {
                    intra += s[i][j];
                    ni += 1.0;
                } else {
                    inter += s[i][j];
                    nx += 1.0;
                }
            }
        }
        if k == 1 {
            return -intra / ni;
        }
        total += (intra / ni) / (inter / nx + eps);
    }
    -total
}

/// Exhaustive minimizer of [`objective`] over partitions into `k` blocks.
/// Returns the best partition and the runner-up margin.
pub fn brute_force(s: &[Vec<f64>], k: usize, eps: f64) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut second = f64::INFINITY;
    for p in set_partitions(s.len(), k) {
        let v = objective(s, &p, k, eps);
        match &best {
            Some((_, b)) if v >= *b => second = second.min(v),
            _ => {
                if let Some((_, b)) = &best {
                    second = second.min(*b);
                }
                best = Some((p, v));
            }
        }
    }
    let (p, v) = best.expect("at least one partition");
    (p, second - v)
}

/// Block ids renamed in order of first appearance.
pub fn canonical(group_of: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    group_of
        .iter()
        .map(|g| {
            let next = map.len();
            *map.entry(*g).or_insert(next)
        })
        .collect()
}

/// A similarity-like matrix with `k` blocks of random sizes (at least two
/// members each): diagonal 2, within-block values near `within`, cross-block
/// values near `across`, symmetric noise of scale `noise`, clipped to [0, 2].
pub fn noisy_blocks(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    within: f64,
    across: f64,
    noise: f64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut truth: Vec<usize> = (0..n).map(|i| if i < 2 * k { i / 2 } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        truth.swap(i, j);
    }
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        s[i][i] = 2.0;
        for j in 0..i {
            let base = if truth[i] == truth[j] { within } else { across };
            let v: f64 = (base + noise * rng.random_range(-1.0..1.0)).clamp(0.0, 2.0);
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    (s, truth)
}

/// Single-pass Pearson correlation plus one, with the same floor on the
/// product of standard deviations as the library.
pub fn shifted_pearson(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    cov / (va.sqrt() * vb.sqrt()).max(floor) + 1.0
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Toy problem for whole-objective gradient checks: `C_l = 8`, `K = 2`,
/// `M = 4`, `Y = 3`, batch 4.
pub mod toy {
    use disentangled_cbm::backbone::{BackboneConfig, StageConfig};
    use disentangled_cbm::model::Model;
    use disentangled_cbm::Tensor;
    use rand::Rng;

    pub struct Problem {
        pub model: Model,
        pub images: Tensor,
        pub concepts: Tensor,
        pub labels: Vec<usize>,
    }

    pub fn problem(seed: u64) -> Problem {
        let config = BackboneConfig {
            input_height: 6,
            input_width: 6,
            input_channels: 3,
            stages: vec![
                StageConfig { filters: 4, kernel: 3, stride: 2 },
                StageConfig { filters: 8, kernel: 3, stride: 1 },
            ],
            grouped_layer_index: 1,
        };
        let model = Model::init(&config, vec![0, 1, 0, 1], 2, 3, seed).unwrap();
        let mut r = super::rng(seed ^ 0x5eed);
        let images = Tensor::new(vec![4, 6, 6, 3], (0..4 * 108).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let concepts = Tensor::new(vec![4, 4], (0..16).map(|_| f64::from(r.random_range(0..2u8))).collect()).unwrap();
        Problem {
            model,
            images,
            concepts,
            labels: vec![0, 1, 2, 1],
        }
    }
}

/// A plain concept-bottleneck training loop with no similarity, grouping
/// loss or clustering anywhere: one SGD-with-momentum update per batch on
/// `L_y + lambda_c L_c`, with the same batching, clipping and half-cosine
/// step size as the trainer. Returns `(l_y, l_c, l_total)` per step.
pub mod vanilla {
    use disentangled_cbm::autodiff::Tape;
    use disentangled_cbm::heads::{class_loss, concept_loss};
    use disentangled_cbm::model::Model;
    use disentangled_cbm::synth::DatasetBundle;
    use disentangled_cbm::trainer::{epoch_order, TrainConfig};
    use disentangled_cbm::Tensor;

    pub fn losses(config: &TrainConfig, data: &DatasetBundle) -> Vec<(f64, f64, f64)> {
        let spec = &data.spec;
        let mut model = Model::init(&config.backbone, vec![0; spec.concepts], 1, spec.classes, config.seed).unwrap();
        let mut params = model.parameters();
        let mut velocity: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut out = Vec::new();
        for epoch in 0..config.epochs {
            let lr = config.learning_rate
                * (0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos()));
            let order = epoch_order(data.train.len(), config.seed, epoch);
            for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let x = tape.constant(data.train.images_tensor(batch, spec));
                let fwd = model.forward(&bound, &mut tape, x).unwrap();
                let l_y = class_loss(&mut tape, fwd.logits, &data.train.labels_of(batch)).unwrap();
                let l_c = concept_loss(&mut tape, fwd.concept_probs, &data.train.concepts_tensor(batch)).unwrap();
                let weighted = tape.mul_scalar(l_c, config.lambda_c);
                let total = tape.add(l_y, weighted).unwrap();
                let value = |v| tape.value(v).data()[0];
                out.push((value(l_y), value(l_c), value(total)));
                let grads = tape.backward(total).unwrap();
                let g: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
                let norm = g.iter().flat_map(|t| t.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
                let clip = (config.grad_clip > 0.0 && norm > config.grad_clip).then(|| config.grad_clip / norm);
                for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&g) {
                    for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *v = config.momentum * *v + clip.map_or(g, |s| s * g);
                        *p -= lr * *v;
                    }
                }
                model = model.with_parameters(&params).unwrap();
            }
        }
        out
    }
}
