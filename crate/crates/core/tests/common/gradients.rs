//! Finite-difference cases for every differentiable operation and for the
//! two composite training objectives.

use gvr_core::autodiff::{Graph, Var};
use gvr_core::gradcheck::grad_check;
use gvr_core::head::{cls_loss_graph, head_logits, init_head, HeadMode};
use gvr_core::model::{init_params, ModelConfig};
use gvr_core::optim::ParamGroup;
use gvr_core::pretrain::stage1_forward;
use gvr_core::tensor::Tensor;
use gvr_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Loss = Box<dyn Fn(&mut Graph, &ParamGroup) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub params: ParamGroup,
    pub loss: Loss,
}

fn group(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamGroup {
    let mut p = ParamGroup::new();
    for (name, shape) in shapes {
        p.insert(name, Tensor::randn(shape, 1.0, rng), 1.0, false).unwrap();
    }
    p
}

fn var(g: &mut Graph, p: &ParamGroup, name: &str) -> Var {
    g.param(p, p.id(name).unwrap())
}

/// Contracts `out` with a fixed random tensor so every output coordinate
/// carries its own weight.
fn contract(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone());
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

struct Builder {
    rng: ChaCha8Rng,
    cases: Vec<Case>,
}

impl Builder {
    /// Registers a case whose output shape is `out_shape`; `f` maps the
    /// parameter leaves (in `shapes` order) to the output node.
    fn add<F>(&mut self, name: &str, shapes: &[(&str, &[usize])], out_shape: &[usize], f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    {
        let params = group(&mut self.rng, shapes);
        let w = Tensor::randn(out_shape, 1.0, &mut self.rng);
        let names: Vec<String> = shapes.iter().map(|(n, _)| n.to_string()).collect();
        self.cases.push(Case {
            name: name.to_string(),
            params,
            loss: Box::new(move |g, p| {
                let leaves: Vec<Var> = names.iter().map(|n| var(g, p, n)).collect();
                let out = f(g, &leaves)?;
                contract(g, out, &w)
            }),
        });
    }
}

/// One case per differentiable operation, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };
    b.add("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], &[3, 2], |g, v| g.matmul(v[0], v[1]));
    b.add("bmm", &[("a", &[2, 3, 4]), ("b", &[2, 4, 2])], &[2, 3, 2], |g, v| g.bmm(v[0], v[1], false));
    b.add("bmm_t", &[("a", &[2, 3, 4]), ("b", &[2, 5, 4])], &[2, 3, 5], |g, v| g.bmm(v[0], v[1], true));
    b.add("linear", &[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5])], &[2, 3, 5], |g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
    b.add("linear_nobias", &[("x", &[3, 4]), ("w", &[4, 2])], &[3, 2], |g, v| g.linear(v[0], v[1], None));
    b.add("add", &[("a", &[3, 4]), ("b", &[3, 4])], &[3, 4], |g, v| g.add(v[0], v[1]));
    b.add("sub", &[("a", &[3, 4]), ("b", &[3, 4])], &[3, 4], |g, v| g.sub(v[0], v[1]));
    b.add("mul", &[("a", &[3, 4]), ("b", &[3, 4])], &[3, 4], |g, v| g.mul(v[0], v[1]));
    b.add("add_broadcast_vec", &[("a", &[2, 3, 4]), ("b", &[4])], &[2, 3, 4], |g, v| {
        g.add_broadcast(v[0], v[1])
    });
    b.add("add_broadcast_mat", &[("a", &[2, 3, 4]), ("b", &[3, 4])], &[2, 3, 4], |g, v| {
        g.add_broadcast(v[0], v[1])
    });
    b.add("mul_scalar_var", &[("x", &[3, 4]), ("s", &[1])], &[3, 4], |g, v| g.mul_scalar_var(v[0], v[1]));
    b.add("scale", &[("x", &[3, 4])], &[3, 4], |g, v| Ok(g.scale(v[0], -1.7)));
    b.add("exp", &[("x", &[3, 4])], &[3, 4], |g, v| Ok(g.exp(v[0])));
    b.add("log", &[("x", &[3, 4])], &[3, 4], |g, v| {
        // Keep the argument positive: log(exp(x) + 0.5).
        let e = g.exp(v[0]);
        let half = g.constant(Tensor::filled(&[3, 4], 0.5));
        let s = g.add(e, half)?;
        Ok(g.log(s))
    });
    b.add("gelu", &[("x", &[3, 4])], &[3, 4], |g, v| Ok(g.gelu(v[0])));
    b.add("softmax", &[("x", &[2, 3, 4])], &[2, 3, 4], |g, v| g.softmax(v[0]));
    b.add("softmax_axis0", &[("x", &[3, 4])], &[3, 4], |g, v| g.softmax_axis(v[0], 0));
    b.add("softmax_axis1", &[("x", &[3, 4])], &[3, 4], |g, v| g.softmax_axis(v[0], 1));
    b.add("log_softmax", &[("x", &[3, 4])], &[3, 4], |g, v| g.log_softmax(v[0]));
    b.add(
        "layer_norm",
        &[("x", &[2, 3, 5]), ("gain", &[5]), ("bias", &[5])],
        &[2, 3, 5],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    b.add("l2_normalize", &[("x", &[3, 4])], &[3, 4], |g, v| g.l2_normalize(v[0]));
    b.add("transpose", &[("x", &[3, 4])], &[4, 3], |g, v| g.transpose(v[0]));
    b.add("permute_102", &[("x", &[2, 3, 4])], &[3, 2, 4], |g, v| g.permute(v[0], &[1, 0, 2]));
    b.add("permute_201", &[("x", &[2, 3, 4])], &[4, 2, 3], |g, v| g.permute(v[0], &[2, 0, 1]));
    b.add("reshape", &[("x", &[3, 4])], &[2, 6], |g, v| g.reshape(v[0], &[2, 6]));
    b.add("slice_rows", &[("x", &[5, 3])], &[3, 3], |g, v| g.slice_rows(v[0], 1, 3));
    b.add("concat_rows", &[("a", &[2, 3]), ("b", &[3, 3])], &[5, 3], |g, v| g.concat_rows(&[v[0], v[1]]));
    b.add("gather_rows", &[("x", &[4, 3])], &[4, 3], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
    for axis in 0..3 {
        let mut out = vec![2, 3, 4];
        out.remove(axis);
        b.add(&format!("sum_axis{axis}"), &[("x", &[2, 3, 4])], &out, move |g, v| g.sum_axis(v[0], axis));
        b.add(&format!("mean_axis{axis}"), &[("x", &[2, 3, 4])], &out, move |g, v| g.mean_axis(v[0], axis));
    }
    b.add("sum", &[("x", &[3, 4])], &[], |g, v| Ok(g.sum(v[0])));
    b.add("mean", &[("x", &[3, 4])], &[], |g, v| g.mean(v[0]));
    b.add("pick", &[("x", &[3, 4])], &[3], |g, v| g.pick(v[0], &[1, 3, 0]));
    b.cases
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        base_dim: 5,
        dim: 4,
        layers: 2,
        heads: 2,
        max_frames: 3,
        ..ModelConfig::default()
    }
}

pub fn jitter(p: &mut ParamGroup, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        if p.get(id).name == "log_tau" {
            continue;
        }
        for v in p.value_mut(id).data_mut() {
            *v += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// The full Stage I objective of a tiny student on a mixed-length batch.
pub fn stage1_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model();
    let mut params = init_params(&cfg, &mut rng).unwrap();
    jitter(&mut params, &mut rng, 0.3);
    let log_tau = params.id("log_tau").unwrap();
    params.value_mut(log_tau).data_mut()[0] = rng.random_range(-1.5..-0.5);
    let clips = vec![
        Tensor::randn(&[2, 5], 1.0, &mut rng),
        Tensor::randn(&[3, 5], 1.0, &mut rng),
        Tensor::randn(&[3, 5], 1.0, &mut rng),
    ];
    let texts = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let alpha = rng.random_range(0.2..0.8);
    Case {
        name: "stage1_l_pre".into(),
        params,
        loss: Box::new(move |g, p| {
            let terms = stage1_forward(g, p, &cfg, &clips, &texts, &[0, 1, 0], alpha)?;
            Ok(terms.l_pre)
        }),
    }
}

fn unit_rows(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    let d = *shape.last().unwrap();
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// The Stage II classification loss of a perturbed head in one mode.
pub fn stage2_case(seed: u64, mode: HeadMode) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c, m, n) = (4, 3, 2, 4);
    let mut params = init_head(d, c, 0, 0.3, &mut rng).unwrap();
    jitter(&mut params, &mut rng, 0.3);
    let ev = unit_rows(&[n, d], &mut rng);
    let texts = unit_rows(&[c, m, d], &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    Case {
        name: format!("stage2_l_cls_{mode:?}"),
        params,
        loss: Box::new(move |g, p| {
            let e = g.constant(ev.clone());
            let t = g.constant(texts.clone());
            let logits = head_logits(g, p, e, t)?;
            cls_loss_graph(g, &logits, &labels, mode)
        }),
    }
}

pub fn all_cases(seed: u64) -> Vec<Case> {
    let mut cases = op_cases(seed);
    cases.push(stage1_case(seed));
    for mode in [HeadMode::Both, HeadMode::Video, HeadMode::Text] {
        cases.push(stage2_case(seed, mode));
    }
    cases
}

#[derive(Debug, Default)]
pub struct SuiteResult {
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

pub fn run_suite(seeds: std::ops::Range<u64>) -> SuiteResult {
    let mut out = SuiteResult::default();
    for seed in seeds {
        for case in all_cases(seed) {
            let loss = &case.loss;
            match grad_check(|g, p| loss(g, p), &case.params, EPS, TOL) {
                Ok(report) => {
                    out.cases += 1;
                    out.coordinates += report.checked;
                    if report.max_rel_err > out.max_rel_err {
                        out.max_rel_err = report.max_rel_err;
                        out.worst = format!("{} seed {seed}", case.name);
                    }
                    if let Some(f) = report.failures.first() {
                        out.failures.push(format!("{} seed {seed}: {f:?}", case.name));
                    }
                }
                Err(e) => out.failures.push(format!("{} seed {seed}: {e}", case.name)),
            }
        }
    }
    out
}
