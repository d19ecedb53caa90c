//! Neural-network variational Monte Carlo for two-dimensional electrons in a
//! honeycomb moiré potential.

pub mod autodiff;
pub mod lattice;
pub mod hamiltonian;
pub mod ed;
pub mod ansatz;
pub mod derivatives;
pub mod sampler;
pub mod optimizer;
pub mod vmc;
pub mod observables;
pub mod checkpoint;
