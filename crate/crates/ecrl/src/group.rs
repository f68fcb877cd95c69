//! Finite symmetry groups (cyclic and dihedral), their matrix representations,
//! and group actions on factored feature vectors and small grid images.
//!
//! Elements are dense identifiers `0..order`. For cyclic groups element `i` is
//! the rotation by `2*pi*i/n`. For dihedral groups elements `0..n` are the
//! rotations and `n..2n` are reflections, where `n + j` is the rotation `j`
//! composed with the reflection across the x-axis.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GroupError {
    #[error("group order must be at least 1")]
    InvalidOrder,
    #[error("unknown group name `{0}` (expected e.g. \"c4\", \"c8\", \"c16\", \"d4\")")]
    UnknownGroup(String),
    #[error("element {element} out of range for group of order {order}")]
    ElementOutOfRange { element: usize, order: usize },
    #[error("representation kind {kind:?} is not supported here")]
    UnsupportedRepresentation { kind: ReprKind },
    #[error("vector length {got} does not match layout dimension {expected}")]
    LayoutMismatch { got: usize, expected: usize },
    #[error("layouts refer to different groups")]
    GroupMismatch,
    #[error("grid image must be square, got {height}x{width}")]
    NonSquareImage { height: usize, width: usize },
    #[error("image data length {got} does not match {expected} (channels*size*size)")]
    ImageDataMismatch { got: usize, expected: usize },
    #[error("grid rotation requires the cyclic group of order 4, got {group}")]
    UnsupportedRotation { group: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Cyclic,
    Dihedral,
}

struct GroupData {
    kind: GroupKind,
    /// The `n` of `C_n` or `D_n`.
    degree: usize,
    order: usize,
    /// Row-major `order x order` table: `composition[a * order + b] = a ∘ b`.
    composition: Vec<usize>,
    inverse: Vec<usize>,
    /// 2x2 row-major orthogonal matrix per element.
    standard: Vec<[f64; 4]>,
}

/// A finite group with dense composition tables and cached representation
/// matrices. Cheap to clone and safe to share across threads.
#[derive(Clone)]
pub struct FiniteGroup {
    inner: Arc<GroupData>,
}

impl fmt::Debug for FiniteGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl PartialEq for FiniteGroup {
    fn eq(&self, other: &Self) -> bool {
        self.inner.kind == other.inner.kind && self.inner.degree == other.inner.degree
    }
}
impl Eq for FiniteGroup {}

fn rotation_matrix(theta: f64) -> [f64; 4] {
    let (s, c) = theta.sin_cos();
    [c, -s, s, c]
}

fn mat2_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

impl FiniteGroup {
    /// The cyclic group `C_n` of `n` planar rotations.
    pub fn cyclic(n: usize) -> Result<Self, GroupError> {
        if n == 0 {
            return Err(GroupError::InvalidOrder);
        }
        let composition = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a + b) % n))
            .collect();
        let inverse = (0..n).map(|a| (n - a) % n).collect();
        let standard = (0..n)
            .map(|i| rotation_matrix(2.0 * std::f64::consts::PI * i as f64 / n as f64))
            .collect();
        Ok(Self {
            inner: Arc::new(GroupData {
                kind: GroupKind::Cyclic,
                degree: n,
                order: n,
                composition,
                inverse,
                standard,
            }),
        })
    }

    /// The dihedral group `D_n` of `n` rotations and `n` reflections.
    pub fn dihedral(n: usize) -> Result<Self, GroupError> {
        if n == 0 {
            return Err(GroupError::InvalidOrder);
        }
        let order = 2 * n;
        // Element n + j is r^j ∘ s with s the x-axis reflection, so
        // (r^i)(r^j) = r^(i+j), (r^i)(r^j s) = r^(i+j) s,
        // (r^i s)(r^j) = r^(i-j) s, (r^i s)(r^j s) = r^(i-j).
        let mut composition = vec![0usize; order * order];
        for a in 0..order {
            for b in 0..order {
                let (ai, ar) = (a % n, a >= n);
                let (bi, br) = (b % n, b >= n);
                let rot = if ar { (ai + n - bi) % n } else { (ai + bi) % n };
                let refl = ar ^ br;
                composition[a * order + b] = if refl { n + rot } else { rot };
            }
        }
        let mut inverse = vec![0usize; order];
        for (g, inv) in inverse.iter_mut().enumerate() {
            *inv = if g < n { (n - g) % n } else { g };
        }
        let flip = [1.0, 0.0, 0.0, -1.0];
        let standard = (0..order)
            .map(|g| {
                let rot = rotation_matrix(2.0 * std::f64::consts::PI * (g % n) as f64 / n as f64);
                if g < n {
                    rot
                } else {
                    mat2_mul(&rot, &flip)
                }
            })
            .collect();
        Ok(Self {
            inner: Arc::new(GroupData {
                kind: GroupKind::Dihedral,
                degree: n,
                order,
                composition,
                inverse,
                standard,
            }),
        })
    }

    /// Parses names of the form `c<n>` or `d<n>`, e.g. "c4", "c8", "c16", "d4".
    pub fn parse(name: &str) -> Result<Self, GroupError> {
        let lower = name.trim().to_ascii_lowercase();
        let (head, digits) = lower.split_at(1.min(lower.len()));
        let n: usize = digits
            .parse()
            .map_err(|_| GroupError::UnknownGroup(name.to_string()))?;
        match head {
            "c" => Self::cyclic(n),
            "d" => Self::dihedral(n),
            _ => Err(GroupError::UnknownGroup(name.to_string())),
        }
    }

    pub fn name(&self) -> String {
        match self.inner.kind {
            GroupKind::Cyclic => format!("c{}", self.inner.degree),
            GroupKind::Dihedral => format!("d{}", self.inner.degree),
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.inner.kind
    }

    /// The `n` of `C_n` or `D_n`.
    pub fn degree(&self) -> usize {
        self.inner.degree
    }

    pub fn order(&self) -> usize {
        self.inner.order
    }

    pub fn identity(&self) -> usize {
        0
    }

    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.inner.order
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        let n = self.inner.order;
        assert!(a < n && b < n, "element out of range");
        self.inner.composition[a * n + b]
    }

    pub fn inverse(&self, g: usize) -> usize {
        assert!(g < self.inner.order, "element out of range");
        self.inner.inverse[g]
    }

    /// The 2x2 orthogonal matrix of the standard representation, row-major.
    pub fn standard_matrix(&self, g: usize) -> &[f64; 4] {
        &self.inner.standard[g]
    }

    pub fn representation(&self, kind: ReprKind) -> Result<Representation, GroupError> {
        Representation::new(self, kind)
    }

    /// Applies the standard representation to a 2-vector slice in place.
    fn act_standard(&self, g: usize, xy: &mut [f64]) {
        let m = &self.inner.standard[g];
        let (x, y) = (xy[0], xy[1]);
        xy[0] = m[0] * x + m[1] * y;
        xy[1] = m[2] * x + m[3] * y;
    }
}

/// The representation kinds used throughout: trivial (scalars fixed),
/// standard (2-vectors rotated/reflected), regular (group-indexed coordinates
/// permuted by left translation), and explicit direct sums of those.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReprKind {
    Trivial,
    Standard,
    Regular,
    DirectSum,
}

impl ReprKind {
    /// Dimension of one block of this kind under the given group.
    pub fn block_dim(&self, group: &FiniteGroup) -> Result<usize, GroupError> {
        match self {
            ReprKind::Trivial => Ok(1),
            ReprKind::Standard => Ok(2),
            ReprKind::Regular => Ok(group.order()),
            ReprKind::DirectSum => Err(GroupError::UnsupportedRepresentation { kind: *self }),
        }
    }
}

/// A matrix representation: one `dim x dim` real matrix per group element.
#[derive(Clone)]
pub struct Representation {
    group: FiniteGroup,
    kind: ReprKind,
    dim: usize,
    /// Row-major `dim x dim` matrix per element.
    matrices: Vec<Vec<f64>>,
}

impl Representation {
    pub fn new(group: &FiniteGroup, kind: ReprKind) -> Result<Self, GroupError> {
        let dim = kind.block_dim(group)?;
        let matrices = group
            .elements()
            .map(|g| match kind {
                ReprKind::Trivial => vec![1.0],
                ReprKind::Standard => group.standard_matrix(g).to_vec(),
                ReprKind::Regular => {
                    // rho_reg(g)[h, h'] = 1 iff h' = g^{-1} ∘ h (left translation).
                    let n = group.order();
                    let ginv = group.inverse(g);
                    let mut m = vec![0.0; n * n];
                    for h in 0..n {
                        m[h * n + group.compose(ginv, h)] = 1.0;
                    }
                    m
                }
                ReprKind::DirectSum => unreachable!(),
            })
            .collect();
        Ok(Self {
            group: group.clone(),
            kind,
            dim,
            matrices,
        })
    }

    /// Block-diagonal direct sum of the layout's blocks.
    pub fn direct_sum(layout: &ReprLayout) -> Self {
        let group = layout.group().clone();
        let dim = layout.total_dim();
        let matrices = group
            .elements()
            .map(|g| {
                let mut m = vec![0.0; dim * dim];
                for (kind, offset, bdim) in layout.block_slices() {
                    let block = Representation::new(&group, kind).expect("basic kind");
                    for r in 0..bdim {
                        for c in 0..bdim {
                            m[(offset + r) * dim + (offset + c)] = block.matrices[g][r * bdim + c];
                        }
                    }
                }
                m
            })
            .collect();
        Self {
            group,
            kind: ReprKind::DirectSum,
            dim,
            matrices,
        }
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn kind(&self) -> ReprKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `dim x dim` matrix of `rho(g)`.
    pub fn matrix(&self, g: usize) -> &[f64] {
        &self.matrices[g]
    }

    /// `rho(g) x`.
    pub fn apply(&self, g: usize, x: &[f64]) -> Result<Vec<f64>, GroupError> {
        if x.len() != self.dim {
            return Err(GroupError::LayoutMismatch {
                got: x.len(),
                expected: self.dim,
            });
        }
        let m = &self.matrices[g];
        let mut y = vec![0.0; self.dim];
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &m[r * self.dim..(r + 1) * self.dim];
            *yr = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(y)
    }

    /// Max deviation of the homomorphism property over all element pairs.
    pub fn homomorphism_deviation(&self) -> f64 {
        let n = self.group.order();
        let d = self.dim;
        let mut worst = 0.0f64;
        for g1 in 0..n {
            for g2 in 0..n {
                let lhs = &self.matrices[self.group.compose(g1, g2)];
                let a = &self.matrices[g1];
                let b = &self.matrices[g2];
                for r in 0..d {
                    for c in 0..d {
                        let prod: f64 = (0..d).map(|k| a[r * d + k] * b[k * d + c]).sum();
                        worst = worst.max((prod - lhs[r * d + c]).abs());
                    }
                }
            }
        }
        worst
    }

    /// True if every matrix is a 0/1 permutation matrix.
    pub fn is_permutation(&self) -> bool {
        let d = self.dim;
        self.matrices.iter().all(|m| {
            let entries_ok = m.iter().all(|&v| v == 0.0 || v == 1.0);
            let rows_ok = (0..d).all(|r| m[r * d..(r + 1) * d].iter().sum::<f64>() == 1.0);
            let cols_ok = (0..d).all(|c| (0..d).map(|r| m[r * d + c]).sum::<f64>() == 1.0);
            entries_ok && rows_ok && cols_ok
        })
    }
}

/// A declared decomposition of a flat feature vector into representation
/// blocks. Group actions use the layout to decide what to rotate, permute, or
/// leave alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprLayout {
    group: FiniteGroup,
    /// `(kind, multiplicity)` in order.
    blocks: Vec<(ReprKind, usize)>,
    total_dim: usize,
}

impl ReprLayout {
    pub fn new(group: &FiniteGroup, blocks: &[(ReprKind, usize)]) -> Result<Self, GroupError> {
        let mut total_dim = 0;
        for &(kind, mult) in blocks {
            total_dim += kind.block_dim(group)? * mult;
        }
        Ok(Self {
            group: group.clone(),
            blocks: blocks.to_vec(),
            total_dim,
        })
    }

    /// `mult` copies of the regular representation.
    pub fn regular(group: &FiniteGroup, mult: usize) -> Self {
        Self::new(group, &[(ReprKind::Regular, mult)]).expect("regular layout")
    }

    /// `mult` trivial scalars.
    pub fn trivial(group: &FiniteGroup, mult: usize) -> Self {
        Self::new(group, &[(ReprKind::Trivial, mult)]).expect("trivial layout")
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn blocks(&self) -> &[(ReprKind, usize)] {
        &self.blocks
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Number of block instances (multiplicities expanded).
    pub fn block_count(&self) -> usize {
        self.blocks.iter().map(|&(_, m)| m).sum()
    }

    /// Expands multiplicities into `(kind, offset, dim)` per block instance.
    pub fn block_slices(&self) -> Vec<(ReprKind, usize, usize)> {
        let mut out = Vec::with_capacity(self.block_count());
        let mut offset = 0;
        for &(kind, mult) in &self.blocks {
            let dim = kind.block_dim(&self.group).expect("validated at new");
            for _ in 0..mult {
                out.push((kind, offset, dim));
                offset += dim;
            }
        }
        out
    }

    pub fn has_standard(&self) -> bool {
        self.blocks
            .iter()
            .any(|&(k, m)| k == ReprKind::Standard && m > 0)
    }

    pub fn is_pool_compatible(&self) -> bool {
        self.blocks
            .iter()
            .all(|&(k, m)| k == ReprKind::Regular || m == 0)
    }

    /// Concatenation of two layouts over the same group.
    pub fn concat(&self, other: &ReprLayout) -> Result<ReprLayout, GroupError> {
        if self.group != other.group {
            return Err(GroupError::GroupMismatch);
        }
        let mut blocks = self.blocks.clone();
        blocks.extend_from_slice(&other.blocks);
        ReprLayout::new(&self.group, &blocks)
    }

    /// The same block structure reinterpreted under another group. Regular
    /// blocks change dimension with the group, so they are rejected.
    pub fn with_group(&self, group: &FiniteGroup) -> Result<ReprLayout, GroupError> {
        if self
            .blocks
            .iter()
            .any(|&(k, m)| k == ReprKind::Regular && m > 0)
        {
            return Err(GroupError::UnsupportedRepresentation {
                kind: ReprKind::Regular,
            });
        }
        ReprLayout::new(group, &self.blocks)
    }

    /// `rho(g) v` where `rho` is the direct sum declared by this layout.
    pub fn act(&self, g: usize, v: &[f64]) -> Result<Vec<f64>, GroupError> {
        if v.len() != self.total_dim {
            return Err(GroupError::LayoutMismatch {
                got: v.len(),
                expected: self.total_dim,
            });
        }
        if g >= self.group.order() {
            return Err(GroupError::ElementOutOfRange {
                element: g,
                order: self.group.order(),
            });
        }
        let mut out = v.to_vec();
        self.act_in_place(g, &mut out);
        Ok(out)
    }

    /// In-place variant of [`act`](Self::act); `v` must match `total_dim`.
    pub fn act_in_place(&self, g: usize, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.total_dim);
        let group = &self.group;
        let n = group.order();
        let ginv = group.inverse(g);
        let mut offset = 0;
        let mut stack = [0.0f64; 32];
        let mut heap;
        let scratch: &mut [f64] = if n <= 32 {
            &mut stack
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        for &(kind, mult) in &self.blocks {
            match kind {
                ReprKind::Trivial => offset += mult,
                ReprKind::Standard => {
                    for _ in 0..mult {
                        group.act_standard(g, &mut v[offset..offset + 2]);
                        offset += 2;
                    }
                }
                ReprKind::Regular => {
                    // y[h] = x[g^{-1} ∘ h]: permute via the composition table.
                    for _ in 0..mult {
                        let block = &mut v[offset..offset + n];
                        scratch[..n].copy_from_slice(block);
                        for h in 0..n {
                            block[h] = scratch[group.compose(ginv, h)];
                        }
                        offset += n;
                    }
                }
                ReprKind::DirectSum => unreachable!("rejected at construction"),
            }
        }
    }
}

/// A square multi-channel grid of pixels, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    channels: usize,
    size: usize,
    values: Vec<f64>,
}

impl GridImage {
    pub fn new(channels: usize, size: usize, values: Vec<f64>) -> Result<Self, GroupError> {
        let expected = channels * size * size;
        if values.len() != expected {
            return Err(GroupError::ImageDataMismatch {
                got: values.len(),
                expected,
            });
        }
        Ok(Self {
            channels,
            size,
            values,
        })
    }

    /// Validates squareness before construction; the type itself only ever
    /// holds square images.
    pub fn from_dims(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, GroupError> {
        if height != width {
            return Err(GroupError::NonSquareImage { height, width });
        }
        Self::new(channels, height, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.values[(ch * self.size + row) * self.size + col]
    }

    /// Rotates about the grid center by the quarter-turn element `g` of `C_4`
    /// (counterclockwise, with rows growing downward). Channels are untouched:
    /// output pixel (x, y) is the input pixel at the inversely rotated
    /// coordinates.
    pub fn rotate(&self, group: &FiniteGroup, g: usize) -> Result<GridImage, GroupError> {
        if group.kind() != GroupKind::Cyclic || group.order() != 4 {
            return Err(GroupError::UnsupportedRotation {
                group: group.name(),
            });
        }
        if g >= 4 {
            return Err(GroupError::ElementOutOfRange {
                element: g,
                order: 4,
            });
        }
        let mut out = self.clone();
        for _ in 0..g {
            out = out.quarter_turn();
        }
        Ok(out)
    }

    /// One 90-degree counterclockwise turn: out[r][c] = in[c][n-1-r].
    fn quarter_turn(&self) -> GridImage {
        let n = self.size;
        let mut values = vec![0.0; self.values.len()];
        for ch in 0..self.channels {
            for r in 0..n {
                for c in 0..n {
                    values[(ch * n + r) * n + c] = self.get(ch, c, n - 1 - r);
                }
            }
        }
        GridImage {
            channels: self.channels,
            size: n,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-12;

    fn groups_under_test() -> Vec<FiniteGroup> {
        vec![
            FiniteGroup::cyclic(1).unwrap(),
            FiniteGroup::cyclic(4).unwrap(),
            FiniteGroup::cyclic(8).unwrap(),
            FiniteGroup::cyclic(16).unwrap(),
            FiniteGroup::dihedral(4).unwrap(),
        ]
    }

    #[test]
    fn cyclic_composition_and_inverse() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        assert_eq!(c4.compose(1, 3), 0); // 90 + 270 degrees is the identity
        let c8 = FiniteGroup::cyclic(8).unwrap();
        assert_eq!(c8.inverse(3), 5);
        let c1 = FiniteGroup::cyclic(1).unwrap();
        assert_eq!(c1.order(), 1);
        assert_eq!(c1.compose(0, 0), 0);
    }

    #[test]
    fn zero_order_is_rejected() {
        assert_eq!(FiniteGroup::cyclic(0).unwrap_err(), GroupError::InvalidOrder);
        assert_eq!(
            FiniteGroup::dihedral(0).unwrap_err(),
            GroupError::InvalidOrder
        );
    }

    #[test]
    fn group_axioms_hold_exhaustively() {
        for group in groups_under_test() {
            let n = group.order();
            for a in 0..n {
                assert_eq!(group.compose(0, a), a);
                assert_eq!(group.compose(a, 0), a);
                assert_eq!(group.compose(group.inverse(a), a), 0);
                assert_eq!(group.compose(a, group.inverse(a)), 0);
                for b in 0..n {
                    for c in 0..n {
                        assert_eq!(
                            group.compose(group.compose(a, b), c),
                            group.compose(a, group.compose(b, c)),
                            "associativity in {}",
                            group.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dihedral_structure() {
        let d4 = FiniteGroup::dihedral(4).unwrap();
        assert_eq!(d4.order(), 8);
        // Every reflection is its own inverse.
        for j in 4..8 {
            assert_eq!(d4.compose(j, j), 0);
            assert_eq!(d4.inverse(j), j);
        }
    }

    #[test]
    fn dihedral_non_commutativity_matches_matrix_oracle() {
        // Oracle: multiply explicit 2x2 orthogonal matrices directly and
        // confirm rotation(1) and reflection(0) do not commute in D_4.
        let d4 = FiniteGroup::dihedral(4).unwrap();
        let rot1 = 1usize;
        let refl0 = 4usize;
        assert_ne!(d4.compose(rot1, refl0), d4.compose(refl0, rot1));

        let rep = d4.representation(ReprKind::Standard).unwrap();
        let ab = mat2_mul(
            d4.standard_matrix(rot1),
            d4.standard_matrix(refl0),
        );
        let ba = mat2_mul(
            d4.standard_matrix(refl0),
            d4.standard_matrix(rot1),
        );
        let diff: f64 = ab.iter().zip(&ba).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.5, "matrix products should differ, got {diff}");
        // The table agrees with the matrix products.
        for (g, m) in [(d4.compose(rot1, refl0), ab), (d4.compose(refl0, rot1), ba)] {
            for (a, b) in rep.matrix(g).iter().zip(&m) {
                assert!((a - b).abs() < TOL);
            }
        }
    }

    #[test]
    fn homomorphism_holds_for_all_kinds() {
        for group in groups_under_test() {
            for kind in [ReprKind::Trivial, ReprKind::Standard, ReprKind::Regular] {
                let rep = group.representation(kind).unwrap();
                let dev = rep.homomorphism_deviation();
                assert!(
                    dev < TOL,
                    "{} {:?} deviation {dev}",
                    group.name(),
                    kind
                );
                let id = rep.matrix(0);
                for r in 0..rep.dim() {
                    for c in 0..rep.dim() {
                        let want = if r == c { 1.0 } else { 0.0 };
                        assert!((id[r * rep.dim() + c] - want).abs() < TOL);
                    }
                }
            }
        }
    }

    #[test]
    fn direct_sum_is_homomorphic() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let layout = ReprLayout::new(
            &c4,
            &[
                (ReprKind::Standard, 1),
                (ReprKind::Trivial, 2),
                (ReprKind::Regular, 1),
            ],
        )
        .unwrap();
        let rep = Representation::direct_sum(&layout);
        assert_eq!(rep.dim(), layout.total_dim());
        assert!(rep.homomorphism_deviation() < TOL);
    }

    #[test]
    fn direct_sum_kind_is_rejected_as_bare_representation() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        assert!(matches!(
            c4.representation(ReprKind::DirectSum),
            Err(GroupError::UnsupportedRepresentation { .. })
        ));
    }

    #[test]
    fn regular_representation_is_permutation() {
        for group in groups_under_test() {
            let rep = group.representation(ReprKind::Regular).unwrap();
            assert!(rep.is_permutation(), "{}", group.name());
        }
    }

    #[test]
    fn standard_rotates_unit_x_to_unit_y() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rep = c4.representation(ReprKind::Standard).unwrap();
        let v = rep.apply(1, &[1.0, 0.0]).unwrap();
        assert!((v[0]).abs() < TOL && (v[1] - 1.0).abs() < TOL);
    }

    #[test]
    fn regular_action_matches_cyclic_shift_formula() {
        // (x_0..x_{N-1}) -> (x_{N-i}, .., x_{N-1}, x_0, .., x_{N-i-1})
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rep = c4.representation(ReprKind::Regular).unwrap();
        let y = rep.apply(1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![4.0, 1.0, 2.0, 3.0]);

        for n in 1..=16usize {
            let g = FiniteGroup::cyclic(n).unwrap();
            let rep = g.representation(ReprKind::Regular).unwrap();
            let x: Vec<f64> = (0..n).map(|k| k as f64 + 0.5).collect();
            for i in 0..n {
                let got = rep.apply(i, &x).unwrap();
                let want: Vec<f64> = (0..n).map(|h| x[(h + n - i) % n]).collect();
                assert_eq!(got, want, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn trivial_fixes_scalars() {
        let c8 = FiniteGroup::cyclic(8).unwrap();
        let rep = c8.representation(ReprKind::Trivial).unwrap();
        for g in c8.elements() {
            assert_eq!(rep.apply(g, &[0.7]).unwrap(), vec![0.7]);
        }
    }

    #[test]
    fn layout_action_on_factored_vector() {
        // (x, y, z, theta, w): the planar pair rotates, the rest is fixed.
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let layout =
            ReprLayout::new(&c4, &[(ReprKind::Standard, 1), (ReprKind::Trivial, 3)]).unwrap();
        assert_eq!(layout.total_dim(), 5);
        let v = [1.0, 0.0, 0.5, 0.2, 1.0];
        let out = layout.act(2, &v).unwrap();
        let want = [-1.0, 0.0, 0.5, 0.2, 1.0];
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < TOL, "{out:?}");
        }
    }

    #[test]
    fn layout_action_is_a_group_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for group in groups_under_test() {
            let layout = ReprLayout::new(
                &group,
                &[
                    (ReprKind::Standard, 2),
                    (ReprKind::Regular, 1),
                    (ReprKind::Trivial, 3),
                ],
            )
            .unwrap();
            for _ in 0..100 {
                let v: Vec<f64> = (0..layout.total_dim())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                assert_eq!(layout.act(0, &v).unwrap(), v, "identity law");
                let g1 = rng.gen_range(0..group.order());
                let g2 = rng.gen_range(0..group.order());
                let composed = layout.act(group.compose(g2, g1), &v).unwrap();
                let sequential = layout.act(g2, &layout.act(g1, &v).unwrap()).unwrap();
                for (a, b) in composed.iter().zip(&sequential) {
                    assert!((a - b).abs() < TOL, "compatibility in {}", group.name());
                }
            }
        }
    }

    #[test]
    fn layout_action_agrees_with_direct_sum_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d4 = FiniteGroup::dihedral(4).unwrap();
        let layout = ReprLayout::new(
            &d4,
            &[
                (ReprKind::Regular, 2),
                (ReprKind::Standard, 1),
                (ReprKind::Trivial, 1),
            ],
        )
        .unwrap();
        let rep = Representation::direct_sum(&layout);
        for g in d4.elements() {
            let v: Vec<f64> = (0..layout.total_dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let fast = layout.act(g, &v).unwrap();
            let slow = rep.apply(g, &v).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < TOL);
            }
        }
    }

    #[test]
    fn layout_rejects_wrong_length() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let layout = ReprLayout::trivial(&c4, 3);
        assert!(matches!(
            layout.act(1, &[1.0, 2.0]),
            Err(GroupError::LayoutMismatch { got: 2, expected: 3 })
        ));
    }

    #[test]
    fn grid_rotation_quarter_turn() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let img = GridImage::new(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rot = img.rotate(&c4, 1).unwrap();
        assert_eq!(rot.values(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(img.rotate(&c4, 0).unwrap(), img);
    }

    #[test]
    fn four_quarter_turns_restore_image() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = GridImage::new(2, 5, values).unwrap();
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = cur.rotate(&c4, 1).unwrap();
        }
        assert_eq!(cur, img);
    }

    #[test]
    fn grid_rotation_preserves_pixel_multiset() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = GridImage::new(3, 4, values.clone()).unwrap();
        for g in 0..4 {
            let mut a = img.rotate(&c4, g).unwrap().values().to_vec();
            let mut b = values.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn grid_rotation_rejects_bad_inputs() {
        assert!(matches!(
            GridImage::from_dims(1, 2, 3, vec![0.0; 6]),
            Err(GroupError::NonSquareImage { .. })
        ));
        let img = GridImage::new(1, 2, vec![0.0; 4]).unwrap();
        let c8 = FiniteGroup::cyclic(8).unwrap();
        assert!(matches!(
            img.rotate(&c8, 1),
            Err(GroupError::UnsupportedRotation { .. })
        ));
    }

    #[test]
    fn parse_group_names() {
        assert_eq!(FiniteGroup::parse("c8").unwrap().order(), 8);
        assert_eq!(FiniteGroup::parse("d4").unwrap().order(), 8);
        assert_eq!(FiniteGroup::parse("C16").unwrap().order(), 16);
        assert!(FiniteGroup::parse("x4").is_err());
        assert!(FiniteGroup::parse("c0").is_err());
    }
}
