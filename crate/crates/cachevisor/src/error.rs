use thiserror::Error;

use crate::addr::PhysAddr;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("{0} is outside physical memory")]
    AddressOutOfRange(PhysAddr),
    #[error("invalid cache geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("guest operations require non-privileged mode")]
    NotUserMode,
    #[error("parse error: {0}")]
    Parse(String),
}
