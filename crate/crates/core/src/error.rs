use thiserror::Error;

use crate::correct::CorrectError;
use crate::dataset::DatasetError;
use crate::exposure::ExposureError;
use crate::gee::GeeError;
use crate::mem::MemError;
use crate::numkit::NumError;
use crate::simlab::SimError;

/// Umbrella error for callers that cross module boundaries (the CLI, mostly).
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Gee(#[from] GeeError),
    #[error(transparent)]
    Correct(#[from] CorrectError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl Error {
    /// Whether the failure is numerical (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Num(_) => true,
            Error::Dataset(_) | Error::Exposure(_) => false,
            Error::Mem(e) => e.is_numerical(),
            Error::Gee(e) => e.is_numerical(),
            Error::Correct(e) => e.is_numerical(),
            Error::Sim(e) => e.is_numerical(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
