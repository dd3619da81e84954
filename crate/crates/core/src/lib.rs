//! Day-ahead (96 x 15-minute) load forecasting: data wrangling, calendar
//! covariates, pattern-sequence and neural forecasters, backtesting and
//! distribution-shift monitoring.

pub mod autodiff;
pub mod backtest;
pub mod covariates;
pub mod drift;
pub mod error;
pub mod models;
pub mod psf;
pub mod series;

pub use error::{Error, Result};
