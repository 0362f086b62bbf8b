//! Object-focus attention regularisation, head temperature tuning and head
//! output reweighting.

mod focus;
mod joint;
mod temperature;

pub use focus::{focus_loss, focus_row, FocusConfig, FocusTerm, FocusValue, QuerySet};
pub use joint::{joint_train, select_focus_layers};
pub use temperature::{
    apply_reweight, apply_temperature, row_entropy, HeadGamma, ReweightConfig, ResolvedHeads, TemperatureConfig,
};
