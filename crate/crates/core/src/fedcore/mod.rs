//! The federated protocol: per-client lr selection and local training,
//! server aggregation, and step-size schedules.

mod aggregate;
mod round;
mod schedule;
mod state;
mod train;

pub use aggregate::{aggregate, exact_mean, Weighting};
pub use round::{run_round, ClientReport, Protocol, RoundOptions, RoundReport};
pub use schedule::{lr_schedule, ScheduleKind};
pub use state::{Candidates, ClientState, GlobalModel, KlScale, LocalConfig};
pub use train::{local_train, meta_select_lr, train_epochs, train_local, Diverged, LrSelection, SgdPlan};

#[cfg(test)]
mod tests;
