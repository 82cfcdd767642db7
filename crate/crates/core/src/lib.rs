//! Local solvers for parametric mathematical programs with complementarity
//! constraints (MPCCs), their sensitivity analysis, and real-time hybrid MPC.

pub mod error;
pub mod exprgraph;
pub mod model;
pub mod mpc;
pub mod pathfollow;
pub mod qp;
pub mod qpcc;
pub mod registry;
pub mod sensitivity;
pub mod solver;

pub use error::{Error, Result};

pub(crate) mod serde_dvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
