//! Equivariant contrastive reinforcement learning at desk scale: finite-group
//! representation algebra, equivariance-by-projection networks, a contrastive
//! goal-conditioned critic and actor, exactly symmetric planar environments,
//! and a tabular oracle for the symmetry properties of optimal solutions.

pub mod group;

pub use group::{FiniteGroup, GridImage, GroupError, GroupKind, Representation, ReprKind, ReprLayout};
