//! Review service for the human filtering step: a persistent queue of
//! candidate samples, leased claims, decision intake and dataset export,
//! exposed over HTTP.

pub mod api;
pub mod clock;
pub mod error;
pub mod journal;
pub mod queue;

pub use api::{router, serve};
pub use clock::{Clock, ManualClock, SystemClock};
pub use error::{ServiceError, ServiceResult};
pub use queue::{Ack, ExportSummary, QueueItem, ReviewQueue, Status, DEFAULT_LEASE_MS};
