//! Measurements that both the oracle tests and the acceptance suite assert on.

use super::*;
use metaland::autodiff::{Graph, HvpNodes, HvpOperator, Session};
use metaland::landscape::{gradient_coherence, trajectory_coherence, HessianProgram, PowerIterationConfig};
use metaland::meta::{inner_adapt, maml_meta_gradient, AdaptationTrace, HyperParams, Order};
use metaland::model::build_loss;
use metaland::runner::{Algorithm, ExperimentConfig};
use metaland::tasks::{build_pool, sample_task, ClassPool, SeedPath, Split, TaskDistributionConfig};

pub fn oracle_specs() -> Vec<ModelSpec> {
    vec![ModelSpec::tiny(), ModelSpec::desk(), ModelSpec::new(10, vec![12, 12, 12], 3)]
}

/// Max relative error over 50 kink-free coordinates, plus how many sampled
/// coordinates straddled a ReLU kink and were redrawn.
pub fn gradient_check(spec: &ModelSpec, seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let params = generic_params(spec, seed);
    let batch = random_batch(&mut r, 10, spec.input_dim, spec.n_way);
    let (_, grad) = loss_and_gradient(spec, &params, &batch).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut rejected = 0;
    let mut checked = 0;
    for coord in sample_coords(&mut r, spec.param_count(), spec.param_count()) {
        if checked == 50 {
            break;
        }
        if !kink_free(spec, &params, &batch, coord, 2.0 * h) {
            rejected += 1;
            continue;
        }
        let fd = five_point(|d| ref_loss(spec, &shifted(&params, coord, d), &batch), h);
        worst = worst.max(rel_err(grad[coord], fd, 1e-4));
        checked += 1;
    }
    assert_eq!(checked, 50);
    (worst, rejected)
}

pub struct TinyProblem {
    pub spec: ModelSpec,
    graph: Graph,
    nodes: HvpNodes,
    pub params: ParameterVector,
    pub batch: LabeledBatch,
}

impl TinyProblem {
    pub fn new(seed: u64) -> Self {
        let spec = ModelSpec::tiny();
        let mut r = rng(seed);
        let params = generic_params(&spec, seed);
        let batch = random_batch(&mut r, 10, spec.input_dim, spec.n_way);
        let mut graph = Graph::new();
        let p = graph.input("p", Shape::column(spec.param_count())).unwrap();
        let x = graph.input("x", batch.features.shape()).unwrap();
        let y = graph.input("y", Shape::new(batch.len(), spec.n_way)).unwrap();
        let loss = build_loss(&mut graph, &spec, p, x, y).unwrap();
        let nodes = graph.hvp_nodes(loss, p, "v").unwrap();
        Self { spec, graph, nodes, params, batch }
    }

    pub fn operator(&self) -> HvpOperator<'_> {
        let s = Session::with_inputs(
            &self.graph,
            [
                ("p", self.params.to_tensor()),
                ("x", self.batch.features.clone()),
                ("y", self.batch.one_hot(self.spec.n_way).unwrap()),
            ],
        )
        .unwrap();
        HvpOperator::new(s, self.nodes.clone())
    }
}

/// Dense Hessian by central differences of the gradient, column by column.
pub fn fd_hessian(spec: &ModelSpec, params: &ParameterVector, batch: &LabeledBatch) -> Option<Vec<f64>> {
    let n = spec.param_count();
    let h = 1e-5;
    let grad_at = |p: Vec<f64>| loss_and_gradient(spec, &ParameterVector::new(p), batch).unwrap().1.into_inner();
    let mut hess = vec![0.0; n * n];
    for j in 0..n {
        if !kink_free(spec, params, batch, j, 2.0 * h) {
            return None;
        }
        let g2 = grad_at(shifted(params, j, 2.0 * h));
        let g1 = grad_at(shifted(params, j, h));
        let m1 = grad_at(shifted(params, j, -h));
        let m2 = grad_at(shifted(params, j, -2.0 * h));
        for i in 0..n {
            hess[i * n + j] = (-g2[i] + 8.0 * g1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h);
        }
    }
    Some(hess)
}

/// Relative L2 error of the HVP against the difference Hessian, or `None`
/// when a coordinate of this problem sits on a kink.
pub fn hvp_error(seed: u64) -> Option<f64> {
    let prob = TinyProblem::new(seed);
    let hess = fd_hessian(&prob.spec, &prob.params, &prob.batch)?;
    let n = prob.spec.param_count();
    let mut r = rng(100 + seed);
    let v = normal_vec(&mut r, n);
    let expected: Vec<f64> = (0..n).map(|i| dot(&hess[i * n..(i + 1) * n], &v)).collect();
    let got = prob.operator().apply(&v).unwrap();
    Some(rel_l2(&got, &expected))
}

/// Relative gap between uᵀHv and vᵀHu.
pub fn hvp_asymmetry(seed: u64) -> f64 {
    let prob = TinyProblem::new(seed);
    let mut op = prob.operator();
    let mut r = rng(7 + seed);
    let u = normal_vec(&mut r, op.dim());
    let v = normal_vec(&mut r, op.dim());
    let hv = op.apply(&v).unwrap();
    let hu = op.apply(&u).unwrap();
    rel_err(dot(&u, &hv), dot(&v, &hu), 0.0)
}

pub fn tiny_pool(seed: u64) -> ClassPool {
    build_pool(&TaskDistributionConfig { input_dim: 8, master_seed: seed, ..Default::default() }).unwrap()
}

pub fn batch(pool: &ClassPool, n: usize, k: usize, q: usize, epoch: u64) -> Vec<Episode> {
    (0..n).map(|i| sample_task(pool, Split::Train, 5, k, q, SeedPath::new(epoch, i as u64)).unwrap()).collect()
}

pub fn tiny_episodes(n: usize, seed: u64) -> Vec<Episode> {
    let pool = tiny_pool(seed);
    (0..n).map(|i| sample_task(&pool, Split::Test, 5, 2, 3, SeedPath::new(seed, i as u64)).unwrap()).collect()
}

pub fn hyper(alpha: f64, steps: usize, n: usize, order: Order) -> HyperParams {
    HyperParams { alpha, inner_steps: steps, meta_batch: n, order, ..Default::default() }
}

/// Max relative error of the second-order meta-gradient against
/// differences of the meta-objective, over 50 kink-free coordinates.
pub fn meta_gradient_check(steps: usize, seed: u64) -> f64 {
    let spec = ModelSpec::tiny();
    let pool = tiny_pool(seed);
    let tasks = batch(&pool, 2, 1, 3, seed);
    let theta = generic_params(&spec, seed);
    let alpha = 0.3;
    let hp = hyper(alpha, steps, tasks.len(), Order::Second);
    let mg = maml_meta_gradient(&spec, &theta, &tasks, &hp).unwrap();
    let h = 1e-5;
    let mut r = rng(seed + 99);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for coord in sample_coords(&mut r, spec.param_count(), spec.param_count()) {
        if checked == 50 {
            break;
        }
        if !meta_kink_free(&spec, &theta, &tasks, alpha, steps, coord, 2.0 * h) {
            continue;
        }
        let fd = five_point(|d| ref_meta_objective(&spec, &shifted(&theta, coord, d), &tasks, alpha, steps), h);
        worst = worst.max(rel_err(mg.gradient[coord], fd, 1e-4));
        checked += 1;
    }
    assert_eq!(checked, 50);
    worst
}

/// Relative errors of power iteration against the dense eigendecomposition
/// at `n` adapted solutions of the tiny model.
pub fn spectral_errors(n: usize) -> Vec<f64> {
    let spec = ModelSpec::tiny();
    let episodes = tiny_episodes(n, 21);
    let theta = generic_params(&spec, 21);
    let program = HessianProgram::build(&spec, episodes[0].support.len()).unwrap();
    let cfg = PowerIterationConfig::default();
    episodes
        .iter()
        .map(|e| {
            let trace = inner_adapt(&spec, &theta, e, 0.1, 5, false).unwrap();
            let mut op = program.operator(&trace.solution, &e.support).unwrap();
            let dim = op.dim();
            let dense = dense_hessian(dim, |v| op.apply(v).unwrap());
            let exact = max_abs_eigenvalue(&dense, dim);
            let est = program.spectral_norm(&trace.solution, &e.support, &cfg).unwrap();
            rel_err(est.norm, exact, 0.0)
        })
        .collect()
}

pub fn trace(start: Vec<f64>, solution: Vec<f64>) -> AdaptationTrace {
    AdaptationTrace::new(start.into(), vec![], solution.into(), vec![0.0])
}

/// Trajectory coherence of `n` random directions in dimension `dim`.
pub fn random_direction_coherence(n: usize, dim: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let traces: Vec<AdaptationTrace> = (0..n).map(|_| trace(vec![0.0; dim], normal_vec(&mut r, dim))).collect();
    let refs: Vec<&AdaptationTrace> = traces.iter().collect();
    trajectory_coherence(&refs, false).unwrap().value
}

/// Coherence of positive multiples of one direction, and of two opposite ones.
pub fn duplicated_and_antipodal(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let d = normal_vec(&mut r, 30);
    let start = normal_vec(&mut r, 30);
    let along = |s: f64| trace(start.clone(), start.iter().zip(&d).map(|(a, b)| a + s * b).collect());
    let dup = [along(1.0), along(2.5), along(0.1)];
    let anti = [along(1.0), along(-3.0)];
    (
        trajectory_coherence(&dup.iter().collect::<Vec<_>>(), false).unwrap().value,
        trajectory_coherence(&anti.iter().collect::<Vec<_>>(), false).unwrap().value,
    )
}

pub fn brute_force_pairs(v: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            s += dot(&v[i], &v[j]);
            n += 1;
        }
    }
    s / n as f64
}

/// Relative gap between the O(n d) identity path and explicit pairs.
pub fn coherence_identity_gap(n: usize, seed: u64) -> f64 {
    let spec = ModelSpec::tiny();
    let episodes = tiny_episodes(n, seed);
    let theta = generic_params(&spec, seed);
    let fast = gradient_coherence(&spec, &theta, &episodes).unwrap();
    let grads: Vec<Vec<f64>> = episodes
        .iter()
        .map(|e| loss_and_gradient(&spec, &theta, &e.support).unwrap().1.iter().map(|g| -g).collect())
        .collect();
    rel_err(fast, brute_force_pairs(&grads), 0.0)
}

/// A config small enough for end-to-end runner tests.
pub fn small_config(algorithm: Algorithm) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(algorithm);
    cfg.model = ModelSpec::tiny();
    cfg.tasks.n_train_classes = 12;
    cfg.tasks.n_test_classes = 8;
    cfg.tasks.q_target = 3;
    cfg.hyper.meta_batch = 2;
    cfg.hyper.inner_steps = 2;
    cfg.hyper.alpha = 0.1;
    cfg.hyper.finetune.batch_size = 16;
    cfg.hyper.finetune.iters_per_epoch = 3;
    cfg.epochs = 2;
    cfg.iterations_per_epoch = 4;
    cfg.eval.flatness_tasks = 3;
    cfg.eval.coherence_tasks = 8;
    cfg
}
