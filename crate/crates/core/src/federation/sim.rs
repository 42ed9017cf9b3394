//! Simulation state and the per-round orchestration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{
    sample_clients, schedule_distillation_steps, schedule_fedavg_init, DistillSchedule,
};
use crate::error::{Error, Result};
use crate::nn::{
    distill, softmax_into, train_fedprox, train_supervised, weighted_average, DistillConfig,
    LabelledBatch, ModelState, Preset, TrainConfig,
};
use crate::partition::LabelledDataset;
use crate::pruning::{PruneReport, Pruner};
use crate::rng::{derive_seed, Purpose};
use crate::tensor::{LogitMatrix, Tensor};

/// How client parameters are locally updated each round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalMode {
    Plain,
    FedProx { mu: f32 },
}

/// Teacher aggregation point: average raw logits then softmax (default), or
/// average the client probability distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    AvgLogits,
    AvgProbs,
}

/// Which group's global model drives pruning in heterogeneous runs; one
/// index set is shared by all groups either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningModelChoice {
    LargestGroup,
    Group(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    /// Participation fraction C in (0, 1].
    pub participation: f64,
    /// FedAvg-initialization rate in percent, (0, 100].
    pub fedavg_init_rate: f64,
    pub local_mode: LocalMode,
    /// Distillation optimizer settings; the seed field is overridden per
    /// (round, group).
    pub distill: DistillConfig,
    pub distill_schedule: DistillSchedule,
    pub teacher_mode: TeacherMode,
    pub pruning_model: PruningModelChoice,
    pub master_seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::InvalidConfig(
                "participation must be in (0, 1]".into(),
            ));
        }
        if !(self.fedavg_init_rate > 0.0 && self.fedavg_init_rate <= 100.0) {
            return Err(Error::InvalidRate(self.fedavg_init_rate));
        }
        self.distill_schedule.validate()?;
        Ok(())
    }
}

/// One simulated client: identity, architecture, private shard and local
/// optimizer settings (the seed field is overridden per round).
#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub id: usize,
    pub preset: Preset,
    pub shard: Vec<usize>,
    pub local: TrainConfig,
}

/// Server-side mirror of one client architecture.
#[derive(Debug, Clone)]
pub struct ArchitectureGroup {
    pub preset: Preset,
    pub members: Vec<usize>,
    pub model: ModelState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BytesAccounting {
    /// Client -> server parameter payloads (only on init rounds).
    pub params_up: u64,
    /// Server -> client global-model broadcasts.
    pub params_down: u64,
    /// Client -> server logit matrices.
    pub logits_up: u64,
    /// Server -> client selected-index lists (4 bytes per index).
    pub indices_down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRoundStats {
    pub preset: String,
    /// Sampled clients that received this group's parameters.
    pub clients: Vec<usize>,
    /// Clients whose parameters were averaged this round (init rounds only).
    pub averaged_clients: Vec<usize>,
    pub distill_steps: usize,
    /// Test accuracy after optional averaging, before distillation.
    pub pre_distill_accuracy: f64,
    pub post_distill_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled_clients: Vec<usize>,
    pub fedavg_init: bool,
    pub selected_indices: Vec<usize>,
    pub groups: Vec<GroupRoundStats>,
    pub macro_avg_accuracy: f64,
    pub bytes: BytesAccounting,
    pub wall_ms: u64,
}

/// Deterministic per-client training seed for a given round.
pub fn client_train_seed(master_seed: u64, round: usize, client_id: usize) -> u64 {
    derive_seed(
        master_seed,
        Purpose::ClientTrain,
        &[round as u64, client_id as u64],
    )
}

/// Row-wise weighted mean of raw logit matrices.
pub fn ensemble_logits(matrices: &[LogitMatrix], weights: &[f64]) -> Result<LogitMatrix> {
    if matrices.is_empty() || matrices.len() != weights.len() {
        return Err(Error::InvalidConfig(format!(
            "ensemble over {} matrices with {} weights",
            matrices.len(),
            weights.len()
        )));
    }
    let (rows, cols) = (matrices[0].rows(), matrices[0].cols());
    for m in matrices {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::MisalignedTargets(format!(
                "logit matrix {}x{} does not match {}x{}",
                m.rows(),
                m.cols(),
                rows,
                cols
            )));
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let mut acc = vec![0.0f64; rows * cols];
    for (m, &w) in matrices.iter().zip(weights) {
        let scale = w / total;
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += scale * v as f64;
        }
    }
    LogitMatrix::new(rows, cols, acc.into_iter().map(|v| v as f32).collect())
}

/// Teacher targets for distillation. `AvgLogits` averages raw logits;
/// `AvgProbs` averages client softmax distributions and returns their logs,
/// so downstream softmax reproduces the averaged probabilities.
pub fn teacher_targets(
    matrices: &[LogitMatrix],
    weights: &[f64],
    mode: TeacherMode,
) -> Result<LogitMatrix> {
    match mode {
        TeacherMode::AvgLogits => ensemble_logits(matrices, weights),
        TeacherMode::AvgProbs => {
            let (rows, cols) = (matrices[0].rows(), matrices[0].cols());
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(Error::DegenerateWeights);
            }
            let mut acc = vec![0.0f64; rows * cols];
            let mut probs = vec![0.0f32; cols];
            for (m, &w) in matrices.iter().zip(weights) {
                if m.rows() != rows || m.cols() != cols {
                    return Err(Error::MisalignedTargets("probs ensemble shape".into()));
                }
                let scale = w / total;
                for r in 0..rows {
                    softmax_into(m.row(r), &mut probs);
                    for (a, &p) in acc[r * cols..(r + 1) * cols].iter_mut().zip(&probs) {
                        *a += scale * p as f64;
                    }
                }
            }
            let data: Vec<f32> = acc
                .into_iter()
                .map(|p| (p.max(crate::nn::PROB_FLOOR)).ln() as f32)
                .collect();
            LogitMatrix::new(rows, cols, data)
        }
    }
}

/// Top-1 accuracy of one model over a labelled batch.
pub fn accuracy(model: &ModelState, data: &LabelledBatch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set is empty".into()));
    }
    let logits = model.forward(&data.inputs)?;
    let mut hits = 0usize;
    for (i, &label) in data.labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Per-group accuracy plus the unweighted macro average.
pub fn evaluate_groups(models: &[&ModelState], test: &LabelledBatch) -> Result<(Vec<f64>, f64)> {
    let per: Vec<f64> = models
        .iter()
        .map(|m| accuracy(m, test))
        .collect::<Result<_>>()?;
    let macro_avg = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, macro_avg))
}

/// Full simulator state; `run_round` only commits on success, so a failed
/// round leaves the pre-round snapshot intact.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: FederationConfig,
    clients: Vec<ClientSpec>,
    shards: Vec<LabelledBatch>,
    group_of: Vec<usize>,
    groups: Vec<ArchitectureGroup>,
    pool: Tensor,
    test: LabelledBatch,
    pruner: Pruner,
    last_report: Option<PruneReport>,
    completed_rounds: usize,
    records: Vec<RoundRecord>,
}

impl Simulation {
    pub fn new(
        cfg: FederationConfig,
        clients: Vec<ClientSpec>,
        train: &LabelledDataset,
        test: &LabelledDataset,
        pool: Tensor,
        pruner: Pruner,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.is_empty() {
            return Err(Error::EmptyData("no clients configured".into()));
        }
        for (i, c) in clients.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidConfig(format!(
                    "client ids must be 0..n in order, found {} at {i}",
                    c.id
                )));
            }
            if c.shard.is_empty() {
                return Err(Error::EmptyData(format!("client {i} has an empty shard")));
            }
            c.local.validate()?;
        }
        if pool.rows() == 0 {
            return Err(Error::EmptyData("empty distillation pool".into()));
        }

        let shards: Vec<LabelledBatch> = clients
            .iter()
            .map(|c| {
                Ok(LabelledBatch::new(
                    train.inputs.gather_rows(&c.shard)?,
                    c.shard.iter().map(|&i| train.labels[i]).collect(),
                )?)
            })
            .collect::<Result<_>>()?;

        // One server-side group per distinct preset, in preset order.
        let mut groups: Vec<ArchitectureGroup> = Vec::new();
        let mut group_of = vec![usize::MAX; clients.len()];
        for preset in [Preset::Small, Preset::Medium, Preset::Wide] {
            let members: Vec<usize> = clients
                .iter()
                .filter(|c| c.preset == preset)
                .map(|c| c.id)
                .collect();
            if members.is_empty() {
                continue;
            }
            let arch = preset.build(train_input_shape(train)?, train.num_classes)?;
            let g = groups.len();
            for &m in &members {
                group_of[m] = g;
            }
            let model = ModelState::init(
                arch,
                derive_seed(cfg.master_seed, Purpose::ModelInit, &[g as u64]),
            )?;
            groups.push(ArchitectureGroup {
                preset,
                members,
                model,
            });
        }

        let test_batch = LabelledBatch::new(test.inputs.clone(), test.labels.clone())?;
        Ok(Self {
            cfg,
            clients,
            shards,
            group_of,
            groups,
            pool,
            test: test_batch,
            pruner,
            last_report: None,
            completed_rounds: 0,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[ArchitectureGroup] {
        &self.groups
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn completed_rounds(&self) -> usize {
        self.completed_rounds
    }

    /// Number of patches in the distillation pool.
    pub fn pool_size(&self) -> usize {
        self.pool.rows()
    }

    /// Selection report of the most recent round, if any.
    pub fn last_prune_report(&self) -> Option<&PruneReport> {
        self.last_report.as_ref()
    }

    fn pruning_group(&self) -> usize {
        match self.cfg.pruning_model {
            PruningModelChoice::Group(g) => g.min(self.groups.len() - 1),
            PruningModelChoice::LargestGroup => (0..self.groups.len())
                .max_by(|&a, &b| {
                    self.groups[a]
                        .members
                        .len()
                        .cmp(&self.groups[b].members.len())
                        .then(b.cmp(&a))
                })
                .unwrap(),
        }
    }

    /// Executes one round end to end and returns its record.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = std::time::Instant::now();
        let round = self.completed_rounds + 1;
        let cfg = self.cfg.clone();
        let init_round = schedule_fedavg_init(round, cfg.fedavg_init_rate)?;

        // 1. Index selection with the current global model.
        let mut pruner = self.pruner.clone();
        let scoring_model = self.groups[self.pruning_group()].model.clone();
        let (selected, report) = pruner.select(&self.pool, &scoring_model)?;
        let selected_patches = self.pool.gather_rows(&selected)?;

        // 2. Sample clients for this round.
        let sampled = sample_clients(
            round,
            self.clients.len(),
            cfg.participation,
            cfg.master_seed,
        )?;

        // 3. Local training and prediction, independent per client.
        struct ClientResult {
            id: usize,
            model: ModelState,
            logits: LogitMatrix,
            weight: f64,
        }
        let results: Vec<ClientResult> = sampled
            .par_iter()
            .map(|&id| -> Result<ClientResult> {
                let client = &self.clients[id];
                let group = &self.groups[self.group_of[id]];
                let global = &group.model;
                let mut local_cfg = client.local.clone();
                local_cfg.rng_seed = client_train_seed(cfg.master_seed, round, id);
                let trained = match cfg.local_mode {
                    LocalMode::Plain => {
                        train_supervised(global, &self.shards[id], &local_cfg)?
                    }
                    LocalMode::FedProx { mu } => {
                        local_cfg.proximal_mu = mu;
                        train_fedprox(global, &self.shards[id], global, &local_cfg)?
                    }
                };
                let logits_t = trained.forward(&selected_patches)?;
                let logits = LogitMatrix::new(
                    logits_t.rows(),
                    logits_t.row_len(),
                    logits_t.into_data(),
                )?;
                Ok(ClientResult {
                    id,
                    model: trained,
                    logits,
                    weight: client.shard.len() as f64,
                })
            })
            .collect::<Result<_>>()?;

        // 4. Bandwidth accounting. Parameters go up only on init rounds.
        let mut bytes = BytesAccounting::default();
        for r in &results {
            let group = &self.groups[self.group_of[r.id]];
            bytes.params_down += group.model.param_bytes();
            bytes.logits_up += r.logits.byte_size();
            bytes.indices_down += (selected.len() * 4) as u64;
            if init_round {
                bytes.params_up += r.model.param_bytes();
            }
        }

        // 5. Teachers span all groups; weights follow private-shard size.
        let matrices: Vec<LogitMatrix> = results.iter().map(|r| r.logits.clone()).collect();
        let weights: Vec<f64> = results.iter().map(|r| r.weight).collect();
        let targets = teacher_targets(&matrices, &weights, cfg.teacher_mode)?;

        // 6. Per-group update: optional FedAvg init, then distillation.
        let group_sizes: Vec<usize> = self.groups.iter().map(|g| g.members.len()).collect();
        let mut new_models = Vec::with_capacity(self.groups.len());
        let mut group_stats = Vec::with_capacity(self.groups.len());
        for (gi, group) in self.groups.iter().enumerate() {
            let in_group: Vec<&ClientResult> = results
                .iter()
                .filter(|r| self.group_of[r.id] == gi)
                .collect();
            let mut averaged_clients = Vec::new();
            let start_model = if init_round && !in_group.is_empty() {
                averaged_clients = in_group.iter().map(|r| r.id).collect();
                let models: Vec<&ModelState> = in_group.iter().map(|r| &r.model).collect();
                let w: Vec<f64> = in_group.iter().map(|r| r.weight).collect();
                weighted_average(&models, &w)?
            } else {
                group.model.clone()
            };
            let pre_acc = accuracy(&start_model, &self.test)?;

            let steps = schedule_distillation_steps(
                round,
                gi,
                &group_sizes,
                cfg.rounds,
                &cfg.distill_schedule,
            )?;
            let mut dcfg = cfg.distill.clone();
            dcfg.rng_seed = derive_seed(
                cfg.master_seed,
                Purpose::Distill,
                &[round as u64, gi as u64],
            );
            let updated = distill(&start_model, &selected_patches, &targets, steps, &dcfg)?;
            let post_acc = accuracy(&updated, &self.test)?;

            group_stats.push(GroupRoundStats {
                preset: group.preset.name().to_string(),
                clients: in_group.iter().map(|r| r.id).collect(),
                averaged_clients,
                distill_steps: steps,
                pre_distill_accuracy: pre_acc,
                post_distill_accuracy: post_acc,
            });
            new_models.push(updated);
        }

        let macro_avg = group_stats
            .iter()
            .map(|g| g.post_distill_accuracy)
            .sum::<f64>()
            / group_stats.len() as f64;

        let record = RoundRecord {
            round,
            sampled_clients: sampled,
            fedavg_init: init_round,
            selected_indices: selected,
            groups: group_stats,
            macro_avg_accuracy: macro_avg,
            bytes,
            wall_ms: started.elapsed().as_millis() as u64,
        };

        // Commit only after every stage succeeded.
        for (g, m) in self.groups.iter_mut().zip(new_models) {
            g.model = m;
        }
        self.pruner = pruner;
        self.last_report = Some(report);
        self.completed_rounds = round;
        self.records.push(record.clone());
        Ok(record)
    }

    /// Runs all configured rounds.
    pub fn run(&mut self) -> Result<&[RoundRecord]> {
        while self.completed_rounds < self.cfg.rounds {
            self.run_round()?;
        }
        Ok(&self.records)
    }
}

fn train_input_shape(ds: &LabelledDataset) -> Result<[usize; 3]> {
    let s = ds.inputs.shape();
    if s.len() != 4 {
        return Err(Error::InputShape {
            expected: vec![0, 0, 0, 0],
            got: s.to_vec(),
        });
    }
    Ok([s[1], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchitectureSpec, LayerSpec};
    use crate::partition::{dirichlet_partition, SynthSpec};
    use crate::rng::stream;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, tag: u64) -> LogitMatrix {
        let mut rng = stream(50, Purpose::Synth, &[tag]);
        LogitMatrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ensemble_identities() {
        let m = random_matrix(4, 3, 1);
        let one = ensemble_logits(std::slice::from_ref(&m), &[2.5]).unwrap();
        assert_eq!(one, m);

        let neg = LogitMatrix::new(4, 3, m.data().iter().map(|v| -v).collect()).unwrap();
        let zero = ensemble_logits(&[m.clone(), neg], &[1.0, 1.0]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ensemble_matches_independent_recompute() {
        let ms = [random_matrix(5, 4, 2), random_matrix(5, 4, 3), random_matrix(5, 4, 4)];
        let w = [1.0, 1.0, 2.0];
        let avg = ensemble_logits(&ms, &w).unwrap();
        for i in 0..5 * 4 {
            let want = (ms[0].data()[i] as f64 + ms[1].data()[i] as f64
                + 2.0 * ms[2].data()[i] as f64)
                / 4.0;
            assert!((avg.data()[i] as f64 - want).abs() < 1e-7);
        }
        let bad = random_matrix(4, 4, 5);
        assert!(ensemble_logits(&[ms[0].clone(), bad], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn avg_probs_teacher_reproduces_mean_distribution() {
        let ms = [random_matrix(3, 4, 6), random_matrix(3, 4, 7)];
        let t = teacher_targets(&ms, &[1.0, 3.0], TeacherMode::AvgProbs).unwrap();
        let mut probs = vec![0.0f32; 4];
        for r in 0..3 {
            softmax_into(t.row(r), &mut probs);
            let mut pa = vec![0.0f32; 4];
            let mut pb = vec![0.0f32; 4];
            softmax_into(ms[0].row(r), &mut pa);
            softmax_into(ms[1].row(r), &mut pb);
            for k in 0..4 {
                let want = 0.25 * pa[k] + 0.75 * pb[k];
                assert!((probs[k] - want).abs() < 1e-5);
            }
        }
    }

    /// 1x1 two-class problem with hand-built models of known accuracy.
    fn threshold_batch() -> LabelledBatch {
        let xs = vec![0.1f32, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9];
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
        LabelledBatch::new(Tensor::new(vec![8, 1, 1, 1], xs).unwrap(), labels).unwrap()
    }

    fn dense_model(weights: [f32; 2], biases: [f32; 2]) -> ModelState {
        let arch = ArchitectureSpec::new(
            [1, 1, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 1,
                    out_dim: 2,
                },
            ],
            0,
            2,
        )
        .unwrap();
        let params = vec![weights[0], weights[1], biases[0], biases[1]];
        ModelState::from_params(arch, Tensor::new(vec![4], params).unwrap()).unwrap()
    }

    #[test]
    fn accuracy_and_macro_average() {
        let data = threshold_batch();
        // Thresholds at 0.5: perfect.
        let perfect = dense_model([-1.0, 1.0], [0.5, -0.5]);
        assert_eq!(accuracy(&perfect, &data).unwrap(), 1.0);
        // Constant class-0 prediction: half right on the balanced set.
        let constant = dense_model([0.0, 0.0], [1.0, 0.0]);
        assert_eq!(accuracy(&constant, &data).unwrap(), 0.5);

        let (per, macro_avg) = evaluate_groups(&[&perfect, &constant], &data).unwrap();
        assert_eq!(per, vec![1.0, 0.5]);
        assert!((macro_avg - 0.75).abs() < 1e-12);
        let (_, single) = evaluate_groups(&[&constant], &data).unwrap();
        assert_eq!(single, 0.5);
    }

    fn toy_simulation(
        n_clients: usize,
        presets: &[Preset],
        participation: f64,
        init_rate: f64,
        steps: usize,
        rounds: usize,
    ) -> Simulation {
        let spec = SynthSpec {
            classes: 3,
            image_size: 8,
            separation: 0.9,
            seed: 40,
        };
        let train = spec.dataset(12, 0).unwrap();
        let test = spec.dataset(4, 1).unwrap();
        let montage = spec.montage(32).unwrap();
        let aug = crate::patchgen::AugmentationConfig {
            patch_size: 8,
            ..Default::default()
        };
        let pool = crate::patchgen::generate_patches(&montage, 30, 40, &aug).unwrap();
        let partition = dirichlet_partition(&train.labels, n_clients, 10.0, 4).unwrap();
        let clients: Vec<ClientSpec> = (0..n_clients)
            .map(|id| ClientSpec {
                id,
                preset: presets[id % presets.len()],
                shard: partition.client_indices[id].clone(),
                local: TrainConfig {
                    learning_rate: 0.02,
                    epochs: 2,
                    batch_size: 8,
                    rng_seed: 0,
                    momentum: 0.0,
                    proximal_mu: 0.0,
                },
            })
            .collect();
        let cfg = FederationConfig {
            rounds,
            participation,
            fedavg_init_rate: init_rate,
            local_mode: LocalMode::Plain,
            distill: DistillConfig {
                learning_rate: 0.005,
                batch_size: 16,
                rng_seed: 0,
                temperature: 1.0,
                momentum: 0.0,
            },
            distill_schedule: DistillSchedule::Uniform {
                steps_per_round: steps,
            },
            teacher_mode: TeacherMode::AvgLogits,
            pruning_model: PruningModelChoice::LargestGroup,
            master_seed: 77,
        };
        let pruner = Pruner::new(None, None, pool.len());
        Simulation::new(cfg, clients, &train, &test, pool.patches, pruner).unwrap()
    }

    #[test]
    fn single_client_full_participation_collapses_to_local_training() {
        // One client, init every round, zero distillation steps: the global
        // model must equal that client's locally trained model bitwise.
        let mut sim = toy_simulation(1, &[Preset::Small], 1.0, 100.0, 0, 1);
        let global0 = sim.groups()[0].model.clone();
        let shard = sim.shards[0].clone();
        let record = sim.run_round().unwrap();
        assert!(record.fedavg_init);

        let mut cfg = sim.clients[0].local.clone();
        cfg.rng_seed = client_train_seed(77, 1, 0);
        let expect = train_supervised(&global0, &shard, &cfg).unwrap();
        assert_eq!(sim.groups()[0].model.params().data(), expect.params().data());
    }

    #[test]
    fn no_init_no_steps_round_is_a_recorded_noop() {
        // Init rate 50% never fires on round 1; with zero distillation steps
        // the global model must be unchanged while the record still lands.
        let mut sim = toy_simulation(2, &[Preset::Small], 1.0, 50.0, 0, 1);
        let before = sim.groups()[0].model.clone();
        let record = sim.run_round().unwrap();
        assert!(!record.fedavg_init);
        assert_eq!(sim.groups()[0].model.params().data(), before.params().data());
        assert_eq!(sim.records().len(), 1);
        assert_eq!(record.bytes.params_up, 0);
        assert!(record.bytes.params_down > 0);
        assert!(record.bytes.logits_up > 0);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let mut a = toy_simulation(3, &[Preset::Small], 0.67, 50.0, 4, 3);
        let mut b = toy_simulation(3, &[Preset::Small], 0.67, 50.0, 4, 3);
        let ra: Vec<RoundRecord> = {
            a.run().unwrap();
            a.records().iter().map(strip_wall).collect()
        };
        let rb: Vec<RoundRecord> = {
            b.run().unwrap();
            b.records().iter().map(strip_wall).collect()
        };
        assert_eq!(ra, rb);
        assert_eq!(
            a.groups()[0].model.params().data(),
            b.groups()[0].model.params().data()
        );
    }

    fn strip_wall(r: &RoundRecord) -> RoundRecord {
        let mut r = r.clone();
        r.wall_ms = 0;
        r
    }

    #[test]
    fn heterogeneous_groups_mirror_architectures() {
        let presets = [Preset::Small, Preset::Medium, Preset::Wide];
        let mut sim = toy_simulation(3, &presets, 1.0, 100.0, 2, 1);
        assert_eq!(sim.groups().len(), 3);
        let record = sim.run_round().unwrap();
        assert_eq!(record.groups.len(), 3);
        for (gi, g) in record.groups.iter().enumerate() {
            // Every client recorded under a group carries that architecture.
            for &c in &g.clients {
                assert_eq!(sim.clients[c].preset.name(), g.preset);
            }
            assert_eq!(sim.groups()[gi].preset.name(), g.preset);
        }
        // Macro average covers all three groups.
        let mean: f64 = record
            .groups
            .iter()
            .map(|g| g.post_distill_accuracy)
            .sum::<f64>()
            / 3.0;
        assert!((record.macro_avg_accuracy - mean).abs() < 1e-12);
    }
}
