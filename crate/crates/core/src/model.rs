//! The routed modular network.
//!
//! A model is a stack of cells. Each cell holds a bank of identically shaped
//! modules, a router that scores the modules from the previous cell's output
//! (the raw input for the first cell), and one MemNet per task that scores the
//! modules from the raw input. Exactly one module processes each sample in
//! each cell. During training the routers choose; at inference the current
//! task's MemNets choose and the routers are never read.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{softmax_xent, GradSet, Mlp, MlpCache, ParamBank};
use crate::routing::{greedy_actions, rir_select, router_loss_and_grads, select_actions};
use crate::tensor::Tensor2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DibConfig {
    pub num_cells: usize,
    pub modules_per_cell: usize,
    /// Width of every layer inside a hidden-cell module.
    pub module_width: usize,
    /// Number of affine+ReLU layers in a hidden-cell module.
    pub module_layers: usize,
    pub router_hidden: Vec<usize>,
    pub memnet_hidden: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl DibConfig {
    /// Two cells of ten modules; 445-wide two-layer hidden modules.
    pub fn full(input_dim: usize, output_dim: usize) -> Self {
        Self {
            num_cells: 2,
            modules_per_cell: 10,
            module_width: 445,
            module_layers: 2,
            router_hidden: vec![256, 256],
            memnet_hidden: vec![128, 128],
            input_dim,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.router_hidden.iter().chain(&self.memnet_hidden).all(|&w| w >= 1);
        if self.num_cells == 0
            || self.modules_per_cell == 0
            || self.module_width == 0
            || self.module_layers == 0
            || self.input_dim == 0
            || self.output_dim == 0
            || !widths_ok
        {
            return Err(Error::InvalidArgument(format!("invalid DIB config {self:?}")));
        }
        Ok(())
    }

    pub fn is_output_cell(&self, cell: usize) -> bool {
        cell + 1 == self.num_cells
    }

    pub fn cell_input_dim(&self, cell: usize) -> usize {
        if cell == 0 {
            self.input_dim
        } else {
            self.module_width
        }
    }

    /// Layer sizes of one module in `cell`.
    pub fn module_sizes(&self, cell: usize) -> Vec<usize> {
        let mut sizes = vec![self.cell_input_dim(cell)];
        if self.is_output_cell(cell) {
            sizes.push(self.output_dim);
        } else {
            sizes.extend(std::iter::repeat_n(self.module_width, self.module_layers));
        }
        sizes
    }

    fn router_sizes(&self, cell: usize) -> Vec<usize> {
        let mut s = vec![self.cell_input_dim(cell)];
        s.extend(&self.router_hidden);
        s.push(self.modules_per_cell);
        s
    }

    fn memnet_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.memnet_hidden);
        s.push(self.modules_per_cell);
        s
    }
}

/// How training-time routing decisions are made.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingMode {
    /// Epsilon-greedy over router Q-values.
    Learned,
    /// Uniform random choice; routers are neither read nor trained.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DibCell {
    pub modules: Vec<Mlp>,
    pub router: Mlp,
    pub memnets: BTreeMap<usize, Mlp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DibModel {
    pub config: DibConfig,
    pub routing: RoutingMode,
    pub cells: Vec<DibCell>,
}

/// Routing outcome of one cell for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Router Q-values (absent under random routing).
    pub router_logits: Option<Tensor2D>,
    pub actions: Vec<usize>,
    pub explored: Vec<bool>,
}

/// Activations of one module applied to a subset of the batch.
#[derive(Clone, Debug)]
pub struct GroupCache {
    pub module: usize,
    pub rows: Vec<usize>,
    cache: MlpCache,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub task_id: usize,
    pub class_logits: Tensor2D,
    pub decisions: Vec<RoutingDecision>,
    pub memnet_logits: Vec<Tensor2D>,
    groups: Vec<Vec<GroupCache>>,
    router_caches: Vec<Option<MlpCache>>,
    memnet_caches: Vec<MlpCache>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.class_logits.rows()
    }

    /// `(cell, module)` pairs used by at least one sample.
    pub fn activated_modules(&self) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(c, gs)| gs.iter().map(move |g| (c, g.module)))
            .collect()
    }
}

/// Per-module parameter gradients for the modules a backward pass touched.
#[derive(Clone, Debug, Default)]
pub struct ModuleGrads {
    pub entries: Vec<(usize, usize, GradSet)>,
}

impl ModuleGrads {
    pub fn sum_squares(&self) -> f64 {
        self.entries.iter().map(|(_, _, g)| g.sum_squares()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, _, g)| g.num_params()).sum()
    }

    pub fn get(&self, cell: usize, module: usize) -> Option<&GradSet> {
        self.entries
            .iter()
            .find(|(c, m, _)| *c == cell && *m == module)
            .map(|(_, _, g)| g)
    }
}

fn group_rows(actions: &[usize], num_modules: usize) -> Vec<(usize, Vec<usize>)> {
    let mut rows = vec![Vec::new(); num_modules];
    for (r, &a) in actions.iter().enumerate() {
        rows[a].push(r);
    }
    rows.into_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .collect()
}

fn check_actions(actions: &[usize], batch: usize, modules: usize) -> Result<()> {
    if actions.len() != batch {
        return shape_err(
            "pooled_module_apply",
            format!("{} actions for {batch} rows", actions.len()),
        );
    }
    if let Some(a) = actions.iter().find(|&&a| a >= modules) {
        return shape_err(
            "pooled_module_apply",
            format!("action {a} with {modules} modules"),
        );
    }
    Ok(())
}

/// Applies `modules[actions[r]]` to row `r` of `inputs`, one batched
/// matrix pipeline per module, with results in the original row order.
pub fn pooled_module_apply(modules: &[Mlp], inputs: &Tensor2D, actions: &[usize]) -> Result<Tensor2D> {
    check_actions(actions, inputs.rows(), modules.len())?;
    let out_dim = modules[0].output_dim();
    let mut out = Tensor2D::zeros(inputs.rows(), out_dim);
    for (m, rows) in group_rows(actions, modules.len()) {
        let y = modules[m].forward(&inputs.gather_rows(&rows))?;
        out.scatter_rows(&rows, &y)?;
    }
    Ok(out)
}

fn pooled_module_apply_cached(
    modules: &[Mlp],
    inputs: &Tensor2D,
    actions: &[usize],
) -> Result<(Tensor2D, Vec<GroupCache>)> {
    check_actions(actions, inputs.rows(), modules.len())?;
    let out_dim = modules[0].output_dim();
    let mut out = Tensor2D::zeros(inputs.rows(), out_dim);
    let mut caches = Vec::new();
    for (m, rows) in group_rows(actions, modules.len()) {
        let (y, cache) = modules[m].forward_cached(&inputs.gather_rows(&rows))?;
        out.scatter_rows(&rows, &y)?;
        caches.push(GroupCache {
            module: m,
            rows,
            cache,
        });
    }
    Ok((out, caches))
}

impl DibModel {
    pub fn new(config: DibConfig, routing: RoutingMode, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut cells = Vec::with_capacity(config.num_cells);
        for c in 0..config.num_cells {
            let sizes = config.module_sizes(c);
            let relu_out = !config.is_output_cell(c);
            let modules = (0..config.modules_per_cell)
                .map(|_| Mlp::new(&sizes, relu_out, rng))
                .collect::<Result<Vec<_>>>()?;
            let router = Mlp::new(&config.router_sizes(c), false, rng)?;
            cells.push(DibCell {
                modules,
                router,
                memnets: BTreeMap::new(),
            });
        }
        Ok(Self {
            config,
            routing,
            cells,
        })
    }

    /// Creates fresh MemNets for `task_id` in every cell.
    pub fn init_task(&mut self, task_id: usize, rng: &mut impl Rng) -> Result<()> {
        let sizes = self.config.memnet_sizes();
        for cell in &mut self.cells {
            cell.memnets.insert(task_id, Mlp::new(&sizes, false, rng)?);
        }
        Ok(())
    }

    pub fn has_task(&self, task_id: usize) -> bool {
        self.cells.iter().all(|c| c.memnets.contains_key(&task_id))
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.cells[0].memnets.keys().copied().collect()
    }

    fn memnet(&self, cell: usize, task_id: usize) -> Result<&Mlp> {
        self.cells[cell]
            .memnets
            .get(&task_id)
            .ok_or(Error::MissingMemNet(task_id))
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return shape_err(
                "DibModel",
                format!("input has {} columns, model expects {}", x.cols(), self.config.input_dim),
            );
        }
        Ok(())
    }

    /// Training-time forward pass with epsilon-greedy (or random) routing.
    pub fn forward_train(
        &self,
        inputs: &Tensor2D,
        epsilon: f64,
        rng: &mut impl Rng,
        task_id: usize,
    ) -> Result<ForwardTrace> {
        self.check_input(inputs)?;
        if !self.has_task(task_id) {
            return Err(Error::MissingMemNet(task_id));
        }
        let n = self.cells.len();
        let mut decisions = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        let mut router_caches = Vec::with_capacity(n);
        let mut memnet_logits = Vec::with_capacity(n);
        let mut memnet_caches = Vec::with_capacity(n);
        let mut h = inputs.clone();
        for (c, cell) in self.cells.iter().enumerate() {
            let decision = match self.routing {
                RoutingMode::Learned => {
                    let (q, cache) = cell.router.forward_cached(&h)?;
                    let sel = select_actions(&q, epsilon, rng);
                    router_caches.push(Some(cache));
                    RoutingDecision {
                        router_logits: Some(q),
                        actions: sel.actions,
                        explored: sel.explored,
                    }
                }
                RoutingMode::Random => {
                    router_caches.push(None);
                    RoutingDecision {
                        router_logits: None,
                        actions: rir_select(h.rows(), self.config.modules_per_cell, rng),
                        explored: vec![true; h.rows()],
                    }
                }
            };
            let (m_logits, m_cache) = self.memnet(c, task_id)?.forward_cached(inputs)?;
            memnet_logits.push(m_logits);
            memnet_caches.push(m_cache);
            let (out, g) = pooled_module_apply_cached(&cell.modules, &h, &decision.actions)?;
            groups.push(g);
            decisions.push(decision);
            h = out;
        }
        Ok(ForwardTrace {
            task_id,
            class_logits: h,
            decisions,
            memnet_logits,
            groups,
            router_caches,
            memnet_caches,
        })
    }

    /// Module choice per cell from the task's MemNets on the raw input.
    pub fn route_infer(&self, inputs: &Tensor2D, task_id: usize) -> Result<Vec<Vec<usize>>> {
        self.check_input(inputs)?;
        (0..self.cells.len())
            .map(|c| Ok(greedy_actions(&self.memnet(c, task_id)?.forward(inputs)?)))
            .collect()
    }

    /// Forward pass along fixed per-cell module choices.
    pub fn forward_routed(&self, inputs: &Tensor2D, actions: &[Vec<usize>]) -> Result<Tensor2D> {
        self.check_input(inputs)?;
        if actions.len() != self.cells.len() {
            return shape_err("forward_routed", "one action list per cell required");
        }
        let mut h = inputs.clone();
        for (cell, acts) in self.cells.iter().zip(actions) {
            h = pooled_module_apply(&cell.modules, &h, acts)?;
        }
        Ok(h)
    }

    fn forward_routed_cached(
        &self,
        inputs: &Tensor2D,
        actions: &[Vec<usize>],
    ) -> Result<(Tensor2D, Vec<Vec<GroupCache>>)> {
        self.check_input(inputs)?;
        let mut h = inputs.clone();
        let mut groups = Vec::with_capacity(self.cells.len());
        for (cell, acts) in self.cells.iter().zip(actions) {
            let (out, g) = pooled_module_apply_cached(&cell.modules, &h, acts)?;
            groups.push(g);
            h = out;
        }
        Ok((h, groups))
    }

    /// Inference: MemNet routing, no exploration, routers untouched.
    pub fn forward_infer(&self, inputs: &Tensor2D, task_id: usize) -> Result<Tensor2D> {
        let actions = self.route_infer(inputs, task_id)?;
        self.forward_routed(inputs, &actions)
    }

    fn modules_backward(
        &self,
        groups: &[Vec<GroupCache>],
        dlogits: &Tensor2D,
        per_row_squares: bool,
    ) -> Result<ModuleGrads> {
        let mut entries = Vec::new();
        let mut upstream = dlogits.clone();
        for c in (0..self.cells.len()).rev() {
            let need_dx = c > 0;
            let mut dh = Tensor2D::zeros(upstream.rows(), self.config.cell_input_dim(c));
            for g in &groups[c] {
                let module = &self.cells[c].modules[g.module];
                let up = upstream.gather_rows(&g.rows);
                let (grads, dx) = if per_row_squares {
                    module.backward_per_row_squares(&g.cache, &up, need_dx)?
                } else {
                    module.backward(&g.cache, &up, need_dx)?
                };
                if let Some(dx) = dx {
                    dh.scatter_rows(&g.rows, &dx)?;
                }
                entries.push((c, g.module, grads));
            }
            upstream = dh;
        }
        entries.sort_by_key(|(c, m, _)| (*c, *m));
        Ok(ModuleGrads { entries })
    }

    /// Gradients of the classification loss for the activated modules, not
    /// accumulated anywhere.
    pub fn classification_grads(&self, trace: &ForwardTrace, dlogits: &Tensor2D) -> Result<ModuleGrads> {
        if !dlogits.same_shape(&trace.class_logits) {
            return shape_err(
                "backward_classification",
                format!("dlogits {:?} vs logits {:?}", dlogits.shape(), trace.class_logits.shape()),
            );
        }
        self.modules_backward(&trace.groups, dlogits, false)
    }

    /// Accumulates the classification gradient into the activated modules
    /// only. Routing decisions are discrete and pass no gradient.
    pub fn backward_classification(
        &mut self,
        trace: &ForwardTrace,
        dlogits: &Tensor2D,
    ) -> Result<ModuleGrads> {
        let grads = self.classification_grads(trace, dlogits)?;
        self.accumulate_module_grads(&grads)?;
        Ok(grads)
    }

    pub fn accumulate_module_grads(&mut self, grads: &ModuleGrads) -> Result<()> {
        for (c, m, g) in &grads.entries {
            self.cells[*c].modules[*m].accumulate(g)?;
        }
        Ok(())
    }

    /// For samples routed along `actions`, the per-module sums over samples
    /// of squared per-sample gradients of `sum_r upstream_r . logits_r`.
    pub fn per_sample_squared_grads(
        &self,
        inputs: &Tensor2D,
        actions: &[Vec<usize>],
        upstream_fn: impl Fn(&Tensor2D) -> Result<Tensor2D>,
    ) -> Result<ModuleGrads> {
        let (logits, groups) = self.forward_routed_cached(inputs, actions)?;
        let upstream = upstream_fn(&logits)?;
        self.modules_backward(&groups, &upstream, true)
    }

    /// MemNet imitation loss per cell. Targets are the router's greedy
    /// actions (the executed actions under random routing) and are constants.
    /// Gradients go to the trace task's MemNets only.
    pub fn memnet_loss_and_grads(&mut self, trace: &ForwardTrace) -> Result<Vec<f64>> {
        let task = trace.task_id;
        let mut losses = Vec::with_capacity(self.cells.len());
        for c in 0..self.cells.len() {
            let decision = &trace.decisions[c];
            let targets = match &decision.router_logits {
                Some(q) => greedy_actions(q),
                None => decision.actions.clone(),
            };
            let out = softmax_xent(&trace.memnet_logits[c], &targets)?;
            let memnet = self.cells[c]
                .memnets
                .get_mut(&task)
                .ok_or(Error::MissingMemNet(task))?;
            let (grads, _) = memnet.backward(&trace.memnet_caches[c], &out.dlogits, false)?;
            memnet.accumulate(&grads)?;
            losses.push(out.loss);
        }
        Ok(losses)
    }

    /// Single-step Q-learning loss per cell against the batch reward.
    /// Returns an empty vector under random routing.
    pub fn router_loss_and_grads(&mut self, trace: &ForwardTrace, reward: f64) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        for c in 0..self.cells.len() {
            let (Some(q), Some(cache)) = (&trace.decisions[c].router_logits, &trace.router_caches[c])
            else {
                continue;
            };
            let (loss, dq) = router_loss_and_grads(q, &trace.decisions[c].actions, reward)?;
            let router = &mut self.cells[c].router;
            let (grads, _) = router.backward(cache, &dq, false)?;
            router.accumulate(&grads)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn module_banks_mut(&mut self) -> impl Iterator<Item = &mut ParamBank> {
        self.cells
            .iter_mut()
            .flat_map(|c| c.modules.iter_mut().map(|m| &mut m.bank))
    }

    pub fn router_banks_mut(&mut self) -> impl Iterator<Item = &mut ParamBank> {
        self.cells.iter_mut().map(|c| &mut c.router.bank)
    }

    pub fn memnet_banks_mut(&mut self, task_id: usize) -> impl Iterator<Item = &mut ParamBank> {
        self.cells
            .iter_mut()
            .filter_map(move |c| c.memnets.get_mut(&task_id).map(|m| &mut m.bank))
    }

    pub fn module_param_count(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| &c.modules)
            .map(Mlp::num_params)
            .sum()
    }

    pub fn router_param_count(&self) -> usize {
        self.cells.iter().map(|c| c.router.num_params()).sum()
    }

    /// MemNet parameters stored per task (all cells).
    pub fn memnet_param_count_per_task(&self) -> usize {
        let sizes = self.config.memnet_sizes();
        self.cells.len()
            * sizes
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum::<usize>()
    }

    /// Drops every router; inference does not need them.
    pub fn discard_routers(&mut self) {
        for cell in &mut self.cells {
            cell.router.bank = ParamBank::new();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bias_name, weight_name};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(modules: usize) -> DibConfig {
        DibConfig {
            num_cells: 2,
            modules_per_cell: modules,
            module_width: 5,
            module_layers: 2,
            router_hidden: vec![6],
            memnet_hidden: vec![4],
            input_dim: 3,
            output_dim: 2,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn model(modules: usize, seed: u64) -> DibModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DibModel::new(tiny_config(modules), RoutingMode::Learned, &mut rng).unwrap();
        m.init_task(0, &mut rng).unwrap();
        m
    }

    #[test]
    fn missing_memnet_is_an_error() {
        let m = model(3, 1);
        let x = random_input(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(m.forward_train(&x, 0.5, &mut rng, 7), Err(Error::MissingMemNet(7))));
        assert!(matches!(m.forward_infer(&x, 7), Err(Error::MissingMemNet(7))));
    }

    #[test]
    fn greedy_routing_follows_router_argmax() {
        let m = model(4, 3);
        let x = random_input(16, 3, 4);
        let t1 = m.forward_train(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(1), 0).unwrap();
        let t2 = m.forward_train(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(2), 0).unwrap();
        assert_eq!(t1.class_logits, t2.class_logits);
        for d in &t1.decisions {
            assert_eq!(d.actions, greedy_actions(d.router_logits.as_ref().unwrap()));
            assert!(d.explored.iter().all(|e| !e));
        }
    }

    #[test]
    fn pooled_matches_whole_batch_for_single_action() {
        let m = model(3, 5);
        let x = random_input(7, 3, 6);
        let mods = &m.cells[0].modules;
        let pooled = pooled_module_apply(mods, &x, &[2; 7]).unwrap();
        assert_eq!(pooled, mods[2].forward(&x).unwrap());
    }

    #[test]
    fn pooled_alternating_matches_naive() {
        let m = model(2, 5);
        let x = random_input(4, 3, 8);
        let mods = &m.cells[0].modules;
        let pooled = pooled_module_apply(mods, &x, &[0, 1, 0, 1]).unwrap();
        for r in 0..4 {
            let y = mods[r % 2].forward(&x.gather_rows(&[r])).unwrap();
            assert_eq!(pooled.row(r), y.row(0));
        }
    }

    #[test]
    fn single_module_equals_plain_network() {
        let m = model(1, 9);
        let x = random_input(6, 3, 10);
        let trace = m.forward_train(&x, 0.7, &mut ChaCha8Rng::seed_from_u64(3), 0).unwrap();
        let plain = m.cells[1].modules[0]
            .forward(&m.cells[0].modules[0].forward(&x).unwrap())
            .unwrap();
        assert_eq!(trace.class_logits, plain);
    }

    #[test]
    fn forced_memnet_routes_through_module_zero() {
        let mut m = model(3, 11);
        // Make every MemNet emit a large logit for module 0.
        for cell in &mut m.cells {
            let net = cell.memnets.get_mut(&0).unwrap();
            let last = net.num_layers() - 1;
            net.bank.value_mut(&weight_name(last)).fill(0.0);
            let b = net.bank.value_mut(&bias_name(last));
            b.fill(0.0);
            b.set(0, 0, 10.0);
        }
        let x = random_input(5, 3, 12);
        let want = m.cells[1].modules[0]
            .forward(&m.cells[0].modules[0].forward(&x).unwrap())
            .unwrap();
        assert_eq!(m.forward_infer(&x, 0).unwrap(), want);
    }

    #[test]
    fn classification_touches_only_activated_modules() {
        let mut m = model(4, 13);
        let x = random_input(3, 3, 14);
        let trace = m.forward_train(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(0), 0).unwrap();
        let routers_before: Vec<_> = m.cells.iter().map(|c| c.router.clone()).collect();
        let out = softmax_xent(&trace.class_logits, &[0, 1, 0]).unwrap();
        m.backward_classification(&trace, &out.dlogits).unwrap();
        for (c, cell) in m.cells.iter().enumerate() {
            assert_eq!(cell.router, routers_before[c]);
            assert!(cell.memnets[&0].bank.iter().all(|(_, p)| p.grad.sum_squares() == 0.0));
            for (k, module) in cell.modules.iter().enumerate() {
                let used = trace.decisions[c].actions.contains(&k);
                if !used {
                    assert!(module.bank.iter().all(|(_, p)| p.grad.sum_squares() == 0.0));
                }
            }
        }
    }

    #[test]
    fn memnet_uniform_loss_is_ln_modules() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut m = DibModel::new(tiny_config(10), RoutingMode::Learned, &mut rng).unwrap();
        m.init_task(0, &mut rng).unwrap();
        for cell in &mut m.cells {
            let net = cell.memnets.get_mut(&0).unwrap();
            let last = net.num_layers() - 1;
            net.bank.value_mut(&weight_name(last)).fill(0.0);
        }
        let x = random_input(8, 3, 16);
        let trace = m.forward_train(&x, 0.3, &mut rng, 0).unwrap();
        let routers_before: Vec<_> = m.cells.iter().map(|c| c.router.clone()).collect();
        let losses = m.memnet_loss_and_grads(&trace).unwrap();
        for l in losses {
            assert!((l - 10f64.ln()).abs() < 1e-12);
        }
        for (c, cell) in m.cells.iter().enumerate() {
            assert_eq!(cell.router, routers_before[c]);
        }
    }

    #[test]
    fn random_routing_skips_router() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut m = DibModel::new(tiny_config(3), RoutingMode::Random, &mut rng).unwrap();
        m.init_task(0, &mut rng).unwrap();
        let x = random_input(8, 3, 18);
        let trace = m.forward_train(&x, 0.0, &mut rng, 0).unwrap();
        assert!(trace.decisions.iter().all(|d| d.router_logits.is_none()));
        assert!(m.router_loss_and_grads(&trace, -1.0).unwrap().is_empty());
        assert_eq!(m.memnet_loss_and_grads(&trace).unwrap().len(), 2);
    }

    #[test]
    fn inference_survives_discarded_routers() {
        let mut m = model(3, 19);
        let x = random_input(6, 3, 20);
        let before = m.forward_infer(&x, 0).unwrap();
        m.discard_routers();
        assert_eq!(m.forward_infer(&x, 0).unwrap(), before);
    }

    #[test]
    fn different_tasks_may_route_differently() {
        let mut m = model(10, 21);
        m.init_task(1, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let x = random_input(32, 3, 22);
        assert_ne!(m.route_infer(&x, 0).unwrap(), m.route_infer(&x, 1).unwrap());
    }
}
