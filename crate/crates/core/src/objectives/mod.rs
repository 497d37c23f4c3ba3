//! Training objectives: CTC, the silence penalty, and the masked-prediction
//! pretraining suite.

pub mod ctc;
pub mod masking;
pub mod silence;
pub mod ssl;
pub mod vq;

pub use ctc::{ctc_loss, CtcTarget};
pub use masking::{frame_energies, select_mask, MaskPlan};
pub use silence::{combined_loss, silence_loss, silence_loss_batch, silence_mask_from_energy, SilenceMask};
pub use ssl::{Curriculum, SslComponents, SslWeights};
pub use vq::{vq_assign, vq_ema_update, CodebookState};
