//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use mtbert::data::{synth_task, Packer, TaskExample, Vocab};
use mtbert::early_exit::{certainty_targets, joint_training_loss};
use mtbert::encoder::{pack_pair_concat_first, pack_single, EncoderConfig, PackedInput, Pass, SeqBatch};
use mtbert::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use mtbert::heads::{
    cosine_embedding_against, cosine_rows, cross_entropy_loss, expand_binary_logits, mse_against, output_loss,
    symmetrized_kl_rows, Labels,
};
use mtbert::model::{ModelConfig, MultitaskModel, PairPacking};
use mtbert::params::ParamStore;
use mtbert::smart::{regularizer_at, smart_objective_with_delta, ReplayPass};
use mtbert::task::TaskKind;
use mtbert::tensor::{Tape, Tensor, Var};
use mtbert::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;

/// One finite-difference comparison.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub name: String,
    pub rel_error: f64,
    pub tol: f64,
    pub worst: String,
}

impl Oracle {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tol
    }
}

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ w ⊙ x` with fixed pseudo-random weights, turning any output into a
/// scalar whose gradient reaches every element.
fn probe_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rand_tensor(&shape, 991 + shape.iter().sum::<usize>() as u64, -1.0, 1.0));
    let prod = tape.mul(x, w)?;
    Ok(tape.sum_all(prod))
}

type PrimitiveFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, PrimitiveFn)> {
    let m = |r, c, s| rand_tensor(&[r, c], s, -1.0, 1.0);
    let pos = |r, c, s| rand_tensor(&[r, c], s, 0.5, 2.0);
    let mut cases: Vec<(&'static str, Vec<Tensor>, PrimitiveFn)> = vec![
        (
            "matmul",
            vec![m(3, 4, 1), m(4, 2, 2)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "bmm",
            vec![
                rand_tensor(&[2, 3, 4], 3, -1.0, 1.0),
                rand_tensor(&[2, 4, 2], 4, -1.0, 1.0),
            ],
            Box::new(|t, v| {
                let y = t.bmm(v[0], v[1], false)?;
                probe_sum(t, y)
            }),
        ),
        (
            "bmm_transposed",
            vec![
                rand_tensor(&[2, 3, 4], 5, -1.0, 1.0),
                rand_tensor(&[2, 5, 4], 6, -1.0, 1.0),
            ],
            Box::new(|t, v| {
                let y = t.bmm(v[0], v[1], true)?;
                probe_sum(t, y)
            }),
        ),
        (
            "add",
            vec![m(2, 3, 7), m(2, 3, 8)],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "sub",
            vec![m(2, 3, 9), m(2, 3, 10)],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "mul",
            vec![m(2, 3, 11), m(2, 3, 12)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "div",
            vec![m(2, 3, 13), pos(2, 3, 14)],
            Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "add_bias",
            vec![m(3, 4, 15), rand_tensor(&[4], 16, -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "scale",
            vec![m(2, 3, 17)],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                probe_sum(t, y)
            }),
        ),
        (
            "add_const",
            vec![m(2, 3, 18)],
            Box::new(|t, v| {
                let y = t.add_const(v[0], &rand_tensor(&[2, 3], 19, -1.0, 1.0))?;
                let sq = t.mul(y, y)?;
                probe_sum(t, sq)
            }),
        ),
        (
            "gelu",
            vec![rand_tensor(&[3, 4], 20, -3.0, 3.0)],
            Box::new(|t, v| {
                let y = t.gelu(v[0]);
                probe_sum(t, y)
            }),
        ),
        (
            "sigmoid",
            vec![rand_tensor(&[3, 4], 21, -4.0, 4.0)],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                probe_sum(t, y)
            }),
        ),
        (
            "log",
            vec![pos(2, 3, 22)],
            Box::new(|t, v| {
                let y = t.log(v[0]);
                probe_sum(t, y)
            }),
        ),
        (
            "sqrt",
            vec![pos(2, 3, 23)],
            Box::new(|t, v| {
                let y = t.sqrt(v[0]);
                probe_sum(t, y)
            }),
        ),
        (
            "relu",
            vec![Tensor::matrix(2, 3, vec![-1.0, 0.4, 2.0, -0.3, 0.9, -2.2]).unwrap()],
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                probe_sum(t, y)
            }),
        ),
        (
            "clamp_min",
            vec![Tensor::matrix(2, 3, vec![0.1, 0.7, -2.0, 1.3, 0.05, 3.0]).unwrap()],
            Box::new(|t, v| {
                let y = t.clamp_min(v[0], 0.3);
                probe_sum(t, y)
            }),
        ),
        (
            "dropout",
            vec![m(4, 5, 24)],
            Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(77);
                let y = t.dropout(v[0], 0.3, true, &mut rng)?;
                probe_sum(t, y)
            }),
        ),
        (
            "softmax_rows",
            vec![rand_tensor(&[3, 5], 25, -2.0, 2.0)],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 1)?;
                probe_sum(t, y)
            }),
        ),
        (
            "softmax_last_axis_3d",
            vec![rand_tensor(&[2, 3, 4], 26, -2.0, 2.0)],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 2)?;
                probe_sum(t, y)
            }),
        ),
        (
            "layer_norm",
            vec![
                m(3, 6, 27),
                rand_tensor(&[6], 28, 0.5, 1.5),
                rand_tensor(&[6], 29, -0.5, 0.5),
            ],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
                probe_sum(t, y)
            }),
        ),
        (
            "sum_all",
            vec![m(2, 3, 30)],
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            }),
        ),
        (
            "mean_all",
            vec![m(2, 3, 31)],
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean_all(sq))
            }),
        ),
        (
            "sum_last",
            vec![m(3, 4, 32)],
            Box::new(|t, v| {
                let y = t.sum_last(v[0]);
                let sq = t.mul(y, y)?;
                probe_sum(t, sq)
            }),
        ),
        (
            "cross_entropy_rows",
            vec![rand_tensor(&[4, 5], 33, -2.0, 2.0)],
            Box::new(|t, v| {
                let y = t.cross_entropy_rows(v[0], &[0, 4, 2, 2])?;
                probe_sum(t, y)
            }),
        ),
        (
            "gather_rows",
            vec![m(4, 3, 34)],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "concat_rows",
            vec![m(2, 3, 35), m(3, 3, 36)],
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                probe_sum(t, y)
            }),
        ),
        (
            "split_heads",
            vec![m(6, 4, 37)],
            Box::new(|t, v| {
                let y = t.split_heads(v[0], 2, 2)?;
                probe_sum(t, y)
            }),
        ),
        (
            "merge_heads",
            vec![rand_tensor(&[4, 3, 2], 38, -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.merge_heads(v[0], 2)?;
                probe_sum(t, y)
            }),
        ),
        (
            "reshape",
            vec![m(2, 6, 39)],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                let sq = t.mul(y, y)?;
                probe_sum(t, sq)
            }),
        ),
    ];
    cases.extend::<Vec<(&'static str, Vec<Tensor>, PrimitiveFn)>>(vec![
        (
            "cosine_rows",
            vec![m(3, 4, 40), m(3, 4, 41)],
            Box::new(|t, v| {
                let y = cosine_rows(t, v[0], v[1])?;
                probe_sum(t, y)
            }),
        ),
        (
            "cross_entropy_binary_expand",
            vec![m(4, 1, 42)],
            Box::new(|t, v| {
                let y = expand_binary_logits(t, v[0])?;
                cross_entropy_loss(t, y, &[1, 0, 0, 1])
            }),
        ),
        (
            "mse",
            vec![m(4, 1, 43)],
            Box::new(|t, v| mse_against(t, v[0], &[0.5, 1.0, -1.0, 2.0])),
        ),
        (
            "cosine_embedding",
            vec![rand_tensor(&[4], 44, -0.9, 0.9)],
            Box::new(|t, v| cosine_embedding_against(t, v[0], &[1, 0, 1, 0], 0.0)),
        ),
        (
            "symmetrized_kl",
            vec![rand_tensor(&[3, 5], 45, -2.0, 2.0), rand_tensor(&[3, 5], 46, -2.0, 2.0)],
            Box::new(|t, v| {
                let p = t.softmax(v[0], 1)?;
                let q = t.softmax(v[1], 1)?;
                symmetrized_kl_rows(t, p, q)
            }),
        ),
    ]);
    cases
}

pub fn primitive_oracles() -> Result<Vec<Oracle>> {
    primitive_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_inputs(&inputs, DEFAULT_STEP, |t, v| f(t, v))?;
            Ok(Oracle {
                name: name.to_string(),
                rel_error: report.max_rel_error(),
                tol: PRIMITIVE_TOL,
                worst: report.worst().map_or(String::new(), |w| w.name.clone()),
            })
        })
        .collect()
}

/// The two-layer, width-8 model used by every composite oracle.
pub fn oracle_model(dropout_p: f64) -> MultitaskModel {
    let mut model = MultitaskModel::new(
        ModelConfig::new(EncoderConfig {
            num_layers: 2,
            hidden: 8,
            num_heads: 2,
            ffn_width: 16,
            dropout_p,
            vocab_size: 20,
            max_len: 16,
            layer_norm_eps: 1e-12,
        }),
        2024,
    )
    .unwrap();
    // Move away from the near-zero initialization: with standard deviation
    // 0.02 the query/key gradients sit close to finite-difference noise.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (_, p) in model.store.iter_mut() {
        let centre = if p.name.contains("norm.weight") { 1.0 } else { 0.0 };
        for v in p.value_mut().data_mut() {
            *v = centre + rng.random_range(-0.5..0.5);
        }
    }
    model
}

/// A padded two-example batch for `task`.
pub fn oracle_batch(task: TaskKind) -> (PackedInput, Labels) {
    let seqs = if task.is_pair() {
        vec![
            pack_pair_concat_first(&[5, 6, 7], &[8, 9], 16),
            pack_pair_concat_first(&[10, 11], &[12, 13, 14, 15], 16),
        ]
    } else {
        vec![pack_single(&[5, 6, 7, 8, 9], 16), pack_single(&[10, 11], 16)]
    };
    let labels = match task {
        TaskKind::Sst => Labels::Classes(vec![3, 1]),
        TaskKind::Para => Labels::Classes(vec![1, 0]),
        TaskKind::Sts => Labels::Scores(vec![4.2, 0.7]),
    };
    (PackedInput::Single(SeqBatch::from_sequences(&seqs).unwrap()), labels)
}

fn with_store(model: &MultitaskModel, store: &ParamStore) -> MultitaskModel {
    let mut m = model.clone();
    m.store = store.clone();
    m
}

fn composite(name: &str, report: mtbert::gradcheck::GradCheckReport) -> Oracle {
    Oracle {
        name: name.to_string(),
        rel_error: report.max_rel_error(),
        tol: COMPOSITE_TOL,
        worst: report.worst().map_or(String::new(), |w| w.name.clone()),
    }
}

/// One full encoder layer, checked against its input and its own parameters,
/// with attention masking and active (replayed) dropout.
pub fn bert_layer_oracles() -> Result<Vec<Oracle>> {
    let model = oracle_model(0.3);
    let (input, _) = oracle_batch(TaskKind::Sst);
    let PackedInput::Single(seqs) = &input else {
        unreachable!()
    };
    let layout = seqs.layout();
    let h0 = rand_tensor(&[layout.rows(), 8], 50, -1.5, 1.5);
    let layer = |tape: &mut Tape, store: &ParamStore, h: Var| -> Result<Var> {
        let mut pass = Pass::train(9);
        let out = model.encoder.layer(0, tape, store, h, &layout, &mut pass)?;
        probe_sum(tape, out)
    };
    let by_input = check_inputs(std::slice::from_ref(&h0), DEFAULT_STEP, |t, v| {
        layer(t, &model.store, v[0])
    })?;
    let by_params = check_params(
        &model.store,
        DEFAULT_STEP,
        |n| n.starts_with("layer.0."),
        |t, s| {
            let h = t.constant(h0.clone());
            layer(t, s, h)
        },
    )?;
    Ok(vec![
        composite("bert_layer/input", by_input),
        composite("bert_layer/params", by_params),
    ])
}

fn smart_delta(model: &MultitaskModel, input: &PackedInput, seed: u64) -> Tensor {
    rand_tensor(&model.encoder.embedding_shape(input), seed, -0.3, 0.3)
}

/// `L + λ·R_s` with the perturbation held fixed, for every task, plus `R_s`
/// on its own so the regularizer's gradient is not hidden by the task loss.
pub fn smart_oracles() -> Result<Vec<Oracle>> {
    let model = oracle_model(0.3);
    let mut out = Vec::new();
    for task in TaskKind::ALL {
        let (input, labels) = oracle_batch(task);
        let delta = smart_delta(&model, &input, 60 + task.index() as u64);
        let objective = check_params(
            &model.store,
            DEFAULT_STEP,
            |_| true,
            |t, s| {
                let m = with_store(&model, s);
                smart_objective_with_delta(&m, t, task, &input, &labels, &mut Pass::train(4), 1.0, &delta)
            },
        )?;
        out.push(composite(&format!("smart_objective/{task}"), objective));
        let regularizer = check_params(
            &model.store,
            DEFAULT_STEP,
            |_| true,
            |t, s| {
                let m = with_store(&model, s);
                let mut pass = Pass::train(4);
                let replay = ReplayPass::of(&pass);
                let n = m.num_layers();
                let states = m.encode(t, task, &input, &mut pass, None, n)?;
                let clean = m.layer_output(t, &states, task, n - 1)?;
                regularizer_at(&m, t, task, &input, &replay, clean, &delta)
            },
        )?;
        out.push(composite(&format!("smart_regularizer/{task}"), regularizer));
    }
    Ok(out)
}

/// `Σ_i (L_i + J_i)` with the certainty targets fixed at their values for the
/// unperturbed parameters.
pub fn joint_loss_oracles() -> Result<Vec<Oracle>> {
    let model = oracle_model(0.0);
    let mut out = Vec::new();
    for task in TaskKind::ALL {
        let (input, labels) = oracle_batch(task);
        let targets: Vec<Vec<f64>> = {
            let mut t = Tape::frozen();
            let states = model.encode(&mut t, task, &input, &mut Pass::eval(), None, 2)?;
            (0..2)
                .map(|i| {
                    let o = model.layer_output(&mut t, &states, task, i).unwrap();
                    certainty_targets(&model, task, t.value(o), &labels)
                })
                .collect()
        };
        let report = check_params(
            &model.store,
            DEFAULT_STEP,
            |_| true,
            |t, s| {
                let m = with_store(&model, s);
                let states = m.encode(t, task, &input, &mut Pass::eval(), None, 2)?;
                joint_training_loss(&m, t, &states, task, &labels, true, Some(&targets))
            },
        )?;
        out.push(composite(&format!("joint_loss/{task}"), report));
        let final_only = check_params(
            &model.store,
            DEFAULT_STEP,
            |n| !n.starts_with("lte."),
            |t, s| {
                let m = with_store(&model, s);
                let states = m.encode(t, task, &input, &mut Pass::eval(), None, 2)?;
                let o = m.layer_output(t, &states, task, 1)?;
                output_loss(&m, t, task, o, &labels)
            },
        )?;
        out.push(composite(&format!("final_loss/{task}"), final_only));
    }
    Ok(out)
}

/// Every gradient oracle in a fixed order.
pub fn gradient_suite() -> Result<Vec<Oracle>> {
    let mut all = primitive_oracles()?;
    all.extend(bert_layer_oracles()?);
    all.extend(smart_oracles()?);
    all.extend(joint_loss_oracles()?);
    Ok(all)
}

/// A desk-profile encoder sized for the synthetic vocabulary.
pub fn desk_model(vocab: &Vocab, layers: usize, seed: u64) -> MultitaskModel {
    let mut enc = EncoderConfig::desk(vocab.len());
    enc.num_layers = layers;
    let mut cfg = ModelConfig::new(enc);
    cfg.pair_packing = PairPacking::ConcatFirst;
    MultitaskModel::new(cfg, seed).unwrap()
}

pub fn packer_for<'a>(model: &MultitaskModel, vocab: &'a Vocab) -> Packer<'a> {
    Packer {
        vocab,
        max_len: model.config.encoder.max_len,
        pair_packing: model.config.pair_packing,
        para_head: model.config.para_head,
    }
}

pub fn synth(task: TaskKind, n: usize, seed: u64) -> Vec<TaskExample> {
    synth_task(task, n, seed).unwrap()
}
