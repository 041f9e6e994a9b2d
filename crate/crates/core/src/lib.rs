pub mod adapteval;
pub mod cli;
pub mod dataset;
pub mod diff;
pub mod metatrain;
pub mod models;
pub mod odeint;
pub mod systems;
pub mod tensor;

pub use tensor::Tensor;

/// CRC-64 (ECMA-182) used for checkpoint and dataset blob checksums.
pub(crate) const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);
