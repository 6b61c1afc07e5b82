//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here goes through the tape except where noted.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dgr_core::data::{gen_synthetic, SyntheticKind, SyntheticSpec, SyntheticTask};
use dgr_core::model::{Activation, LayerParams, Mlp};
use dgr_core::{Labels, LossKind, MinibatchSampler, ModelBundle, MultiTaskDataset, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Central differences of `f` with respect to every entry of every tensor.
pub fn fd_grad(f: impl Fn(&[Tensor]) -> f64, params: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = params.to_vec();
    params
        .iter()
        .enumerate()
        .map(|(p, t)| {
            let mut g = vec![0.0; t.len()];
            for (i, gi) in g.iter_mut().enumerate() {
                let orig = work[p].values()[i];
                work[p].values_mut()[i] = orig + h;
                let up = f(&work);
                work[p].values_mut()[i] = orig - h;
                let down = f(&work);
                work[p].values_mut()[i] = orig;
                *gi = (up - down) / (2.0 * h);
            }
            Tensor::new(t.rows(), t.cols(), g).unwrap()
        })
        .collect()
}

pub fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.values().to_vec()).collect()
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
        Activation::Identity => v,
    }
}

/// Loop-nest evaluation of an MLP; also returns every pre-activation.
pub fn naive_mlp_with_pre(layers: &[LayerParams], x: &Tensor) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row_slice(r).to_vec()).collect();
    let mut pre_all = Vec::new();
    for l in layers {
        let (out, inp) = (l.weight.rows(), l.weight.cols());
        rows = rows
            .iter()
            .map(|h| {
                (0..out)
                    .map(|j| {
                        let mut s = 0.0;
                        for k in 0..inp {
                            s += h[k] * l.weight.get(j, k);
                        }
                        s += l.bias.get(0, j);
                        pre_all.push(s);
                        act(l.activation, s)
                    })
                    .collect()
            })
            .collect();
    }
    (rows, pre_all)
}

pub fn naive_mlp(layers: &[LayerParams], x: &Tensor) -> Vec<Vec<f64>> {
    naive_mlp_with_pre(layers, x).0
}

/// Batch-mean cross-entropy or element-mean squared error.
pub fn naive_loss(labels: &Labels, pred: &[Vec<f64>]) -> f64 {
    let n = pred.len() as f64;
    match labels {
        Labels::Classes(c) => {
            pred.iter()
                .zip(c)
                .map(|(row, &y)| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - row[y]
                })
                .sum::<f64>()
                / n
        }
        Labels::Values(v) => pred.iter().zip(v).map(|(row, y)| (row[0] - y).powi(2)).sum::<f64>() / n,
    }
}

pub struct RandomNet {
    pub mlp: Mlp,
    pub x: Tensor,
    pub labels: Labels,
    pub kind: LossKind,
}

fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    [Activation::Relu, Activation::Tanh, Activation::Identity][rng.random_range(0..3)]
}

/// Small dense net with random widths, activations, loss and batch. ReLU
/// pre-activations are kept at least `kink_margin` away from zero so that
/// finite differences never straddle the kink; rejected draws are redrawn.
pub fn random_net(rng: &mut ChaCha8Rng, kink_margin: f64) -> RandomNet {
    loop {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=4)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..=4));
        }
        let classification = rng.random_bool(0.5);
        let out = if classification { rng.random_range(2..=4) } else { 1 };
        *dims.last_mut().unwrap() = out;
        let layers: Vec<LayerParams> = dims
            .windows(2)
            .map(|w| LayerParams {
                weight: rand_tensor(rng, w[1], w[0], 1.0),
                bias: rand_tensor(rng, 1, w[1], 0.5),
                activation: random_activation(rng),
            })
            .collect();
        let batch = rng.random_range(1..=5);
        let x = rand_tensor(rng, batch, dims[0], 1.5);
        let (labels, kind) = if classification {
            (Labels::Classes((0..batch).map(|_| rng.random_range(0..out)).collect()), LossKind::SoftmaxCrossEntropy { num_classes: out })
        } else {
            (Labels::Values((0..batch).map(|_| rng.random_range(-2.0..2.0)).collect()), LossKind::MeanSquaredError)
        };
        let (_, pre) = naive_mlp_with_pre(&layers, &x);
        let mut idx = 0;
        let mut near_kink = false;
        for l in &layers {
            let count = x.rows() * l.weight.rows();
            if l.activation == Activation::Relu && pre[idx..idx + count].iter().any(|v| v.abs() < kink_margin) {
                near_kink = true;
            }
            idx += count;
        }
        if !near_kink {
            return RandomNet { mlp: Mlp::new(layers).unwrap(), x, labels, kind };
        }
    }
}

/// Rebuilds layers from a flat tensor list laid out as weight, bias, ...
pub fn with_params(template: &Mlp, params: &[Tensor]) -> Vec<LayerParams> {
    template
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerParams { weight: params[2 * i].clone(), bias: params[2 * i + 1].clone(), activation: l.activation })
        .collect()
}

pub fn synthetic_spec(n: usize, tasks: Vec<(&str, SyntheticKind)>, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n,
        p: 8,
        latent_dim: 4,
        num_components: 6,
        component_weights: None,
        separation: 2.0,
        tasks: tasks.into_iter().map(|(id, kind)| SyntheticTask { id: id.into(), kind }).collect(),
        noise_std: 0.3,
        seed,
    }
}

pub fn classification(c: usize) -> SyntheticKind {
    SyntheticKind::Classification { num_classes: c, grouping_seed: None }
}

pub fn regression() -> SyntheticKind {
    SyntheticKind::Regression { weights_seed: None }
}

pub fn toy_dataset(n: usize, seed: u64) -> MultiTaskDataset {
    gen_synthetic(&synthetic_spec(n, vec![("a", classification(3)), ("b", regression())], seed)).unwrap()
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Hard-parameter-sharing trainer written against the tape alone: one graph
/// holding the encoder and every head, the plain sum of task losses, and a
/// hand-rolled Adam. Batches come from the same sampler seed the library
/// trainer uses.
pub fn vanilla_reference(
    mut bundle: ModelBundle,
    dataset: &MultiTaskDataset,
    batch_size: usize,
    sampler_seed: u64,
    lr: f64,
    steps: u64,
) -> ModelBundle {
    use dgr_core::losses::task_loss;
    use dgr_core::Tape;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut sampler = MinibatchSampler::new(dataset.len(), batch_size, sampler_seed).unwrap();
    let mut slots: BTreeMap<usize, AdamSlot> = BTreeMap::new();
    for t in 1..=steps {
        let batch = dataset.batch(&sampler.next_batch());
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let ev = bundle.encoder.mlp.bind(&mut tape, true);
        let z = bundle.encoder.mlp.apply(&mut tape, &ev, x).unwrap();
        let mut total = None;
        let mut all = ev.flat();
        let mut head_vars = Vec::new();
        for (k, head) in bundle.predictors.iter().enumerate() {
            let hv = head.mlp.bind(&mut tape, true);
            let pred = head.mlp.apply(&mut tape, &hv, z).unwrap();
            let kind = dataset.tasks()[k].loss;
            let l = task_loss(&mut tape, &kind, &batch.labels[k], pred).unwrap();
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l).unwrap(),
            });
            head_vars.push(hv.flat());
        }
        for hv in &head_vars {
            all.extend(hv);
        }
        let grads = tape.backward(total.unwrap(), &all).unwrap();
        let mut params: Vec<&mut Tensor> = bundle.encoder.mlp.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        for head in bundle.predictors.iter_mut() {
            params.extend(head.mlp.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]));
        }
        for (i, (p, g)) in params.into_iter().zip(&grads).enumerate() {
            let slot = slots.entry(i).or_insert_with(|| AdamSlot { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            let c1 = 1.0 - b1.powi(t as i32);
            let c2 = 1.0 - b2.powi(t as i32);
            for (j, (pv, &gv)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                slot.m[j] = b1 * slot.m[j] + (1.0 - b1) * gv;
                slot.v[j] = b2 * slot.v[j] + (1.0 - b2) * gv * gv;
                *pv -= lr * (slot.m[j] / c1) / ((slot.v[j] / c2).sqrt() + eps);
            }
        }
    }
    bundle
}

/// Every trainable parameter of a bundle, flattened in a fixed order.
pub fn trainable_values(bundle: &ModelBundle) -> Vec<f64> {
    let mut out: Vec<f64> = bundle.encoder.mlp.parameters().flat_map(|t| t.values().to_vec()).collect();
    for h in &bundle.predictors {
        out.extend(h.mlp.parameters().flat_map(|t| t.values().to_vec()));
    }
    out
}

/// All-pairs distances, stable sort, then the documented vote.
pub fn brute_force_knn(train: &Tensor, labels: &[usize], classes: usize, test: &Tensor, k: usize) -> Vec<usize> {
    (0..test.rows())
        .map(|q| {
            let mut d: Vec<(f64, usize)> = (0..train.rows())
                .map(|i| {
                    let s: f64 = train.row_slice(i).iter().zip(test.row_slice(q)).map(|(a, b)| (a - b).powi(2)).sum();
                    (s.sqrt(), i)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut count = vec![0usize; classes];
            let mut total = vec![0.0; classes];
            for &(dist, i) in &d[..k.min(d.len())] {
                count[labels[i]] += 1;
                total[labels[i]] += dist;
            }
            (0..classes)
                .min_by(|&a, &b| count[b].cmp(&count[a]).then(total[a].total_cmp(&total[b])).then(a.cmp(&b)))
                .unwrap()
        })
        .collect()
}
