//! Gradient-check fixtures shared by the gradient tests and the acceptance run.

use omnic::autodiff::{Tape, Var};
use omnic::data::synth::{generate_corpus, SyntheticCorpusSpec};
use omnic::encoder::Bound;
use omnic::gradcheck::{rel_err, GradCheck};
use omnic::pretrain::{contrastive_step_loss, nt_xent_loss, stacked_pairing};
use omnic::{EncoderConfig, Modality, ModalitySample, OmniEncoder, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const LINEAR_TOL: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub struct OpCheck {
    pub name: &'static str,
    pub linear: bool,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn tol(&self) -> f64 {
        if self.linear { LINEAR_TOL } else { TOL }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol()
    }
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `v` with fixed random weights so the scalar depends on every
/// output entry differently.
fn probe<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = tape.constant(rand_tensor(&v.shape(), 99));
    Ok(v.mul(w)?.sum())
}

fn run<Func>(out: &mut Vec<OpCheck>, name: &'static str, linear: bool, params: &[Tensor<f64>], f: Func)
where
    Func: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let report = GradCheck::new(H, if linear { LINEAR_TOL } else { TOL }).run(params, f).unwrap();
    out.push(OpCheck { name, linear, max_rel_err: report.max_rel_err });
}

/// Every differentiable tape operator, each at exhaustive coordinates.
pub fn operator_checks() -> Vec<OpCheck> {
    let mut out = Vec::new();
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[4, 5], 2);
    let bt = rand_tensor(&[5, 4], 3);
    let c = rand_tensor(&[3, 4], 4);
    let bias = rand_tensor(&[4], 5);
    let batched = rand_tensor(&[2, 3, 4], 6);
    let batched_r = rand_tensor(&[2, 4, 2], 7);
    let o = &mut out;
    run(o, "matmul", true, &[a.clone(), b.clone()], |t, p| probe(t, p[0].matmul(p[1])?));
    run(o, "matmul_t", true, &[a.clone(), bt], |t, p| probe(t, p[0].matmul_t(p[1])?));
    run(o, "batched matmul", true, &[batched.clone(), batched_r], |t, p| probe(t, p[0].matmul(p[1])?));
    run(o, "shared-rhs matmul", true, &[batched.clone(), b], |t, p| probe(t, p[0].matmul(p[1])?));
    run(o, "add", true, &[a.clone(), c.clone()], |t, p| probe(t, p[0].add(p[1])?));
    run(o, "add_bias", true, &[a.clone(), bias], |t, p| probe(t, p[0].add_bias(p[1])?));
    run(o, "mul", true, &[a.clone(), c.clone()], |t, p| probe(t, p[0].mul(p[1])?));
    run(o, "scale", true, &[a.clone()], |t, p| probe(t, p[0].scale(-2.5)));
    run(o, "sum", true, &[a.clone()], |_, p| Ok(p[0].sum()));
    run(o, "mean", true, &[a.clone()], |_, p| Ok(p[0].mean()));
    run(o, "concat rows", true, &[a.clone(), c.clone()], |t, p| probe(t, Var::concat(&[p[0], p[1]], 0)?));
    run(o, "concat cols", true, &[a.clone(), c], |t, p| probe(t, Var::concat(&[p[0], p[1]], 1)?));
    run(o, "slice", true, &[batched.clone()], |t, p| probe(t, p[0].slice(1, 1, 2)?));
    run(o, "reshape", true, &[a.clone()], |t, p| probe(t, p[0].reshape(&[2, 6])?));
    run(o, "permute", true, &[batched], |t, p| probe(t, p[0].permute(&[2, 0, 1])?));
    run(o, "transpose", true, &[a.clone()], |t, p| probe(t, p[0].transpose()?));
    run(o, "expand", true, &[a.clone()], |t, p| probe(t, p[0].expand(3)?));
    run(o, "embedding", true, &[a.clone()], |t, p| probe(t, p[0].embedding(&[2, 0, 2, 1])?));
    run(o, "gather_cols", true, &[a.clone()], |t, p| probe(t, p[0].gather_cols(&[3, 1, 3])?));
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    run(o, "mask_fill", true, &[a], |t, p| probe(t, p[0].mask_fill(&mask, -7.0)?));

    let x = rand_tensor(&[3, 5], 11);
    // keep relu inputs away from the kink
    let away = Tensor::from_vec(&[3, 5], x.data().iter().map(|v| v + 0.1 * v.signum()).collect()).unwrap();
    let gain = rand_tensor(&[5], 12);
    let beta = rand_tensor(&[5], 13);
    run(o, "relu", false, &[away], |t, p| probe(t, p[0].relu()));
    run(o, "gelu", false, &[x.clone()], |t, p| probe(t, p[0].gelu()));
    run(o, "exp", false, &[x.clone()], |t, p| probe(t, p[0].exp()));
    run(o, "softmax", false, &[x.clone()], |t, p| probe(t, p[0].softmax()?));
    run(o, "layer_norm", false, &[x.clone(), gain, beta], |t, p| probe(t, p[0].layer_norm(p[1], p[2], 1e-5)?));
    run(o, "l2_normalize", false, &[x.clone()], |t, p| probe(t, p[0].l2_normalize()));
    run(o, "cross_entropy", false, &[x], |_, p| p[0].cross_entropy(&[4, 0, 2]));
    run(o, "nt_xent", false, &[rand_tensor(&[6, 4], 14)], |_, p| nt_xent_loss(p[0], &stacked_pairing(3), 0.5));
    out
}

fn encoder_loss(enc: &OmniEncoder<f64>, v1: &[ModalitySample], v2: &[ModalitySample], m: Modality) -> f64 {
    let tape = Tape::new();
    let b = Bound::frozen(&tape, &enc.params);
    contrastive_step_loss(enc, &b, v1, v2, m, 0.05).unwrap().item()
}

/// Worst relative error per modality of the desk encoder + NT-Xent on a
/// two-sample batch, over `coords` sampled coordinates of every parameter.
pub fn encoder_check(coords: usize) -> Vec<(Modality, f64, usize)> {
    let cfg = EncoderConfig::desk();
    let mut enc = OmniEncoder::<f32>::new(cfg.clone(), 5).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut out = Vec::new();
    for m in Modality::ALL {
        let corpus = generate_corpus(&SyntheticCorpusSpec::new(m, 2, 2, 0.3, 1, &cfg)).unwrap();
        let (v1, v2) = (&corpus[..2], &corpus[2..]);
        let analytic = {
            let tape = Tape::new();
            let b = Bound::new(&tape, &enc.params);
            let loss = contrastive_step_loss(&enc, &b, v1, v2, m, 0.05).unwrap();
            b.collect_grads(&tape.backward(loss).unwrap())
        };
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (name, g) in &analytic {
            // text embeddings only receive gradient on the rows in use
            let picks: Vec<usize> = if name == "embed.text.weight" {
                let nz: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i] != 0.0).collect();
                nz.iter().step_by((nz.len() / coords).max(1)).copied().collect()
            } else {
                (0..coords).map(|_| rng.random_range(0..g.len())).collect()
            };
            for c in picks {
                let orig = enc.params.get(name).unwrap().data()[c];
                enc.params.get_mut(name).unwrap().data_mut()[c] = orig + H;
                let plus = encoder_loss(&enc, v1, v2, m);
                enc.params.get_mut(name).unwrap().data_mut()[c] = orig - H;
                let minus = encoder_loss(&enc, v1, v2, m);
                enc.params.get_mut(name).unwrap().data_mut()[c] = orig;
                worst = worst.max(rel_err(g.data()[c], (plus - minus) / (2.0 * H)));
                checked += 1;
            }
        }
        out.push((m, worst, checked));
    }
    out
}
