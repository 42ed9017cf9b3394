//! The federated round loop: client sampling, local training, logit
//! collection, scheduled parameter averaging, ensemble distillation, and
//! per-architecture client-model mirroring on the server.

mod schedule;
mod sim;

pub use schedule::{
    sample_clients, schedule_distillation_steps, schedule_fedavg_init, DistillSchedule,
};
pub use sim::{
    accuracy, client_train_seed, ensemble_logits, evaluate_groups, teacher_targets,
    ArchitectureGroup, BytesAccounting, ClientSpec, FederationConfig, GroupRoundStats, LocalMode,
    PruningModelChoice, RoundRecord, Simulation, TeacherMode,
};
