//! Finite group actions on the state space `Y = {0, .., n_y-1}`.
//!
//! Two action families are supported:
//!
//! * **Cyclic** — the shifts `y -> (y + k) mod n_y`. The action is simply
//!   transitive: every ordered pair of states is connected by exactly one
//!   element, so every fiber is a singleton.
//! * **Symmetry** — the full permutation group `S_{n_y}` acting on `Y` in the
//!   natural way. The action is transitive but not free; the fiber of any
//!   state pair has `(n_y - 1)!` elements.
//!
//! [`StateSpace::track`] is the brute-force state-tracking oracle: it replays
//! a word of group elements from an initial state and returns every
//! intermediate state. All corpus labeling and evaluation checks go through
//! it.

use crate::rng::Rng;

/// Which family of group actions a state space uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Cyclic,
    Symmetry,
}

impl std::fmt::Display for ActionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActionKind::Cyclic => write!(f, "cyclic"),
            ActionKind::Symmetry => write!(f, "symmetry"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GroupError {
    #[error("state space size must be at least 2, got {0}")]
    SpaceTooSmall(usize),
    #[error("symmetry mode caps n_y at {max}, got {got} (|G| = n_y! must stay enumerable)")]
    SymmetryTooLarge { got: usize, max: usize },
    #[error("value {value} out of range for state space of size {n_y}")]
    ValueOutOfRange { value: usize, n_y: usize },
    #[error("element built for n_y = {element} applied in space of size {space}")]
    SpaceMismatch { element: usize, space: usize },
    #[error("cannot compose elements of different kinds ({0} vs {1})")]
    KindMismatch(ActionKind, ActionKind),
    #[error("permutation image {0:?} is not a bijection on 0..{1}")]
    NotABijection(Vec<usize>, usize),
}

/// One group element, tagged with the space size it acts on.
///
/// Symmetry elements are stored in one-line notation: `image[y]` is where `y`
/// goes. Composition is `(g2 * g1)[y] = g2[g1[y]]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum GroupElement {
    Cyclic { n_y: usize, shift: usize },
    Symmetry { image: Vec<usize> },
}

impl GroupElement {
    pub fn kind(&self) -> ActionKind {
        match self {
            GroupElement::Cyclic { .. } => ActionKind::Cyclic,
            GroupElement::Symmetry { .. } => ActionKind::Symmetry,
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            GroupElement::Cyclic { n_y, .. } => *n_y,
            GroupElement::Symmetry { image } => image.len(),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            GroupElement::Cyclic { shift, .. } => *shift == 0,
            GroupElement::Symmetry { image } => image.iter().enumerate().all(|(i, &v)| i == v),
        }
    }
}

/// The fiber `{ g : g(source) = target }`.
#[derive(Clone, Debug)]
pub struct Fiber {
    pub target: usize,
    pub source: usize,
    pub elements: Vec<GroupElement>,
}

/// Maximum `n_y` for symmetry mode; 8! = 40320 elements is the largest group
/// the enumeration cache is allowed to hold.
pub const MAX_SYMMETRY_NY: usize = 8;

/// A finite state space together with its acting group, fully enumerated.
#[derive(Clone, Debug)]
pub struct StateSpace {
    kind: ActionKind,
    n_y: usize,
    elements: Vec<GroupElement>,
}

impl StateSpace {
    pub fn new(kind: ActionKind, n_y: usize) -> Result<Self, GroupError> {
        if n_y < 2 {
            return Err(GroupError::SpaceTooSmall(n_y));
        }
        if kind == ActionKind::Symmetry && n_y > MAX_SYMMETRY_NY {
            return Err(GroupError::SymmetryTooLarge {
                got: n_y,
                max: MAX_SYMMETRY_NY,
            });
        }
        let elements = match kind {
            ActionKind::Cyclic => (0..n_y)
                .map(|shift| GroupElement::Cyclic { n_y, shift })
                .collect(),
            ActionKind::Symmetry => enumerate_permutations(n_y)
                .into_iter()
                .map(|image| GroupElement::Symmetry { image })
                .collect(),
        };
        Ok(StateSpace { kind, n_y, elements })
    }

    pub fn cyclic(n_y: usize) -> Result<Self, GroupError> {
        StateSpace::new(ActionKind::Cyclic, n_y)
    }

    pub fn symmetry(n_y: usize) -> Result<Self, GroupError> {
        StateSpace::new(ActionKind::Symmetry, n_y)
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    /// Group order: `n_y` for cyclic, `n_y!` for symmetry.
    pub fn order(&self) -> usize {
        self.elements.len()
    }

    /// All group elements in canonical order (shift order / lexicographic
    /// one-line notation). This order defines the action-token indices of the
    /// vocabulary and must stay stable.
    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn identity(&self) -> GroupElement {
        match self.kind {
            ActionKind::Cyclic => GroupElement::Cyclic {
                n_y: self.n_y,
                shift: 0,
            },
            ActionKind::Symmetry => GroupElement::Symmetry {
                image: (0..self.n_y).collect(),
            },
        }
    }

    pub fn element(&self, index: usize) -> &GroupElement {
        &self.elements[index]
    }

    /// Canonical index of an element: the shift for cyclic, the lexicographic
    /// rank (Lehmer code) for symmetry.
    pub fn index_of(&self, g: &GroupElement) -> Result<usize, GroupError> {
        self.check_element(g)?;
        match g {
            GroupElement::Cyclic { shift, .. } => Ok(*shift),
            GroupElement::Symmetry { image } => Ok(lehmer_rank(image)),
        }
    }

    fn check_value(&self, y: usize) -> Result<(), GroupError> {
        if y >= self.n_y {
            return Err(GroupError::ValueOutOfRange {
                value: y,
                n_y: self.n_y,
            });
        }
        Ok(())
    }

    fn check_element(&self, g: &GroupElement) -> Result<(), GroupError> {
        if g.kind() != self.kind {
            return Err(GroupError::KindMismatch(g.kind(), self.kind));
        }
        if g.n_y() != self.n_y {
            return Err(GroupError::SpaceMismatch {
                element: g.n_y(),
                space: self.n_y,
            });
        }
        if let GroupElement::Symmetry { image } = g {
            let mut seen = vec![false; self.n_y];
            for &v in image {
                if v >= self.n_y || seen[v] {
                    return Err(GroupError::NotABijection(image.clone(), self.n_y));
                }
                seen[v] = true;
            }
        }
        Ok(())
    }

    /// `g . y`.
    pub fn apply(&self, g: &GroupElement, y: usize) -> Result<usize, GroupError> {
        self.check_element(g)?;
        self.check_value(y)?;
        Ok(match g {
            GroupElement::Cyclic { n_y, shift } => (y + shift) % n_y,
            GroupElement::Symmetry { image } => image[y],
        })
    }

    /// `g2 ∘ g1`, i.e. apply `g1` first.
    pub fn compose(&self, g2: &GroupElement, g1: &GroupElement) -> Result<GroupElement, GroupError> {
        self.check_element(g2)?;
        self.check_element(g1)?;
        Ok(match (g2, g1) {
            (GroupElement::Cyclic { n_y, shift: s2 }, GroupElement::Cyclic { shift: s1, .. }) => {
                GroupElement::Cyclic {
                    n_y: *n_y,
                    shift: (s1 + s2) % n_y,
                }
            }
            (GroupElement::Symmetry { image: im2 }, GroupElement::Symmetry { image: im1 }) => {
                GroupElement::Symmetry {
                    image: im1.iter().map(|&y| im2[y]).collect(),
                }
            }
            _ => unreachable!("kinds checked above"),
        })
    }

    pub fn inverse(&self, g: &GroupElement) -> Result<GroupElement, GroupError> {
        self.check_element(g)?;
        Ok(match g {
            GroupElement::Cyclic { n_y, shift } => GroupElement::Cyclic {
                n_y: *n_y,
                shift: (n_y - shift) % n_y,
            },
            GroupElement::Symmetry { image } => {
                let mut inv = vec![0; image.len()];
                for (i, &v) in image.iter().enumerate() {
                    inv[v] = i;
                }
                GroupElement::Symmetry { image: inv }
            }
        })
    }

    /// The fiber `{ g in G : g(y) = j }`, computed by filtering the full
    /// enumeration.
    pub fn fiber(&self, j: usize, y: usize) -> Result<Fiber, GroupError> {
        self.check_value(j)?;
        self.check_value(y)?;
        let elements = self
            .elements
            .iter()
            .filter(|g| match g {
                GroupElement::Cyclic { n_y, shift } => (y + shift) % n_y == j,
                GroupElement::Symmetry { image } => image[y] == j,
            })
            .cloned()
            .collect();
        Ok(Fiber {
            target: j,
            source: y,
            elements,
        })
    }

    /// Ground-truth state tracking: returns `[y_1, .., y_L]` with
    /// `y_i = g_i(y_{i-1})`.
    pub fn track(&self, y0: usize, word: &[GroupElement]) -> Result<Vec<usize>, GroupError> {
        self.check_value(y0)?;
        let mut states = Vec::with_capacity(word.len());
        let mut y = y0;
        for g in word {
            y = self.apply(g, y)?;
            states.push(y);
        }
        Ok(states)
    }

    /// Uniform draw from `G`, with replacement across calls.
    pub fn sample_uniform(&self, rng: &mut Rng) -> GroupElement {
        self.elements[rng.gen_range(self.elements.len())].clone()
    }
}

/// All permutations of `0..n` in lexicographic order of one-line notation.
fn enumerate_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity((1..=n).product());
    loop {
        out.push(current.clone());
        // Next permutation in lexicographic order.
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
        current.swap(i, j);
        current[i + 1..].reverse();
    }
    out
}

/// Lexicographic rank of a permutation in one-line notation.
fn lehmer_rank(image: &[usize]) -> usize {
    let n = image.len();
    let mut rank = 0;
    let mut factorial = (1..n.max(1)).product::<usize>(); // (n-1)!
    for i in 0..n {
        let smaller_after = image[i + 1..].iter().filter(|&&v| v < image[i]).count();
        rank += smaller_after * factorial;
        if n - i > 1 {
            factorial /= n - i - 1;
        }
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_cyclic_wraps() {
        let space = StateSpace::cyclic(6).unwrap();
        let g = GroupElement::Cyclic { n_y: 6, shift: 2 };
        assert_eq!(space.apply(&g, 5).unwrap(), 1);
    }

    #[test]
    fn apply_symmetry_swap() {
        let space = StateSpace::symmetry(3).unwrap();
        // swaps 0 and 1, fixes 2
        let g = GroupElement::Symmetry {
            image: vec![1, 0, 2],
        };
        assert_eq!(space.apply(&g, 0).unwrap(), 1);
        assert_eq!(space.apply(&g, 1).unwrap(), 0);
        assert_eq!(space.apply(&g, 2).unwrap(), 2);
    }

    #[test]
    fn identity_fixes_everything() {
        for space in [StateSpace::cyclic(7).unwrap(), StateSpace::symmetry(4).unwrap()] {
            let e = space.identity();
            for y in 0..space.n_y() {
                assert_eq!(space.apply(&e, y).unwrap(), y);
            }
        }
    }

    #[test]
    fn apply_rejects_mismatched_space() {
        let space = StateSpace::cyclic(6).unwrap();
        let g = GroupElement::Cyclic { n_y: 5, shift: 1 };
        assert!(matches!(
            space.apply(&g, 0),
            Err(GroupError::SpaceMismatch { .. })
        ));
        assert!(matches!(
            space.apply(&space.identity(), 6),
            Err(GroupError::ValueOutOfRange { .. })
        ));
    }

    #[test]
    fn compose_cyclic_adds_shifts() {
        let space = StateSpace::cyclic(6).unwrap();
        let g1 = GroupElement::Cyclic { n_y: 6, shift: 2 };
        let g2 = GroupElement::Cyclic { n_y: 6, shift: 3 };
        assert_eq!(
            space.compose(&g2, &g1).unwrap(),
            GroupElement::Cyclic { n_y: 6, shift: 5 }
        );
    }

    #[test]
    fn compose_rejects_kind_mismatch() {
        let space = StateSpace::cyclic(3).unwrap();
        let g = GroupElement::Symmetry {
            image: vec![0, 1, 2],
        };
        assert!(matches!(
            space.compose(&g, &space.identity()),
            Err(GroupError::KindMismatch(..))
        ));
    }

    #[test]
    fn compose_matches_apply_after_apply_exhaustively_s3() {
        // Brute-force check over all 6 x 6 x 3 triples.
        let space = StateSpace::symmetry(3).unwrap();
        for g2 in space.elements() {
            for g1 in space.elements() {
                let composed = space.compose(g2, g1).unwrap();
                for y in 0..3 {
                    let direct = space.apply(&composed, y).unwrap();
                    let chained = space.apply(g2, space.apply(g1, y).unwrap()).unwrap();
                    assert_eq!(direct, chained);
                }
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity_s3() {
        let space = StateSpace::symmetry(3).unwrap();
        for g in space.elements() {
            let inv = space.inverse(g).unwrap();
            assert!(space.compose(g, &inv).unwrap().is_identity());
            assert!(space.compose(&inv, g).unwrap().is_identity());
        }
    }

    #[test]
    fn group_laws_hold_on_sampled_triples() {
        // Associativity on random triples, identity, inverse, for the sizes
        // the enumeration is meant to cover.
        let mut rng = Rng::new(99);
        let spaces = [
            StateSpace::cyclic(12).unwrap(),
            StateSpace::symmetry(5).unwrap(),
        ];
        for space in &spaces {
            for _ in 0..500 {
                let a = space.sample_uniform(&mut rng);
                let b = space.sample_uniform(&mut rng);
                let c = space.sample_uniform(&mut rng);
                let left = space
                    .compose(&space.compose(&a, &b).unwrap(), &c)
                    .unwrap();
                let right = space
                    .compose(&a, &space.compose(&b, &c).unwrap())
                    .unwrap();
                assert_eq!(left, right, "associativity failed");
                let inv = space.inverse(&a).unwrap();
                assert!(space.compose(&a, &inv).unwrap().is_identity());
            }
        }
    }

    #[test]
    fn fiber_cyclic_is_singleton() {
        let space = StateSpace::cyclic(6).unwrap();
        let fiber = space.fiber(4, 1).unwrap();
        assert_eq!(fiber.elements.len(), 1);
        assert_eq!(fiber.elements[0], GroupElement::Cyclic { n_y: 6, shift: 3 });
        for j in 0..6 {
            for y in 0..6 {
                assert_eq!(space.fiber(j, y).unwrap().elements.len(), 1);
            }
        }
    }

    #[test]
    fn fiber_symmetry_has_factorial_size() {
        let space = StateSpace::symmetry(5).unwrap();
        for j in 0..5 {
            for y in 0..5 {
                let fiber = space.fiber(j, y).unwrap();
                assert_eq!(fiber.elements.len(), 24);
                for g in &fiber.elements {
                    assert_eq!(space.apply(g, y).unwrap(), j);
                }
            }
        }
    }

    #[test]
    fn fiber_of_fixed_point_contains_identity() {
        for space in [StateSpace::cyclic(5).unwrap(), StateSpace::symmetry(4).unwrap()] {
            for y in 0..space.n_y() {
                let fiber = space.fiber(y, y).unwrap();
                assert!(fiber.elements.iter().any(|g| g.is_identity()));
            }
        }
    }

    #[test]
    fn track_empty_word() {
        let space = StateSpace::cyclic(6).unwrap();
        assert!(space.track(0, &[]).unwrap().is_empty());
    }

    #[test]
    fn track_running_sums() {
        let space = StateSpace::cyclic(6).unwrap();
        let word = [1, 2, 3].map(|shift| GroupElement::Cyclic { n_y: 6, shift });
        assert_eq!(space.track(0, &word).unwrap(), vec![1, 3, 0]);
    }

    #[test]
    fn track_final_state_matches_fold_compose() {
        let space = StateSpace::symmetry(5).unwrap();
        let mut rng = Rng::new(2024);
        for _ in 0..1000 {
            let len = 1 + rng.gen_range(20);
            let word: Vec<GroupElement> =
                (0..len).map(|_| space.sample_uniform(&mut rng)).collect();
            let y0 = rng.gen_range(5);
            let tracked = space.track(y0, &word).unwrap();
            let mut folded = space.identity();
            for g in &word {
                folded = space.compose(g, &folded).unwrap();
            }
            assert_eq!(*tracked.last().unwrap(), space.apply(&folded, y0).unwrap());
        }
    }

    #[test]
    fn sample_uniform_is_balanced_c2() {
        let space = StateSpace::cyclic(2).unwrap();
        let mut rng = Rng::new(17);
        let mut ones = 0usize;
        for _ in 0..10_000 {
            if let GroupElement::Cyclic { shift: 1, .. } = space.sample_uniform(&mut rng) {
                ones += 1;
            }
        }
        let freq = ones as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "shift-1 frequency {freq}");
    }

    #[test]
    fn sample_uniform_covers_s3() {
        let space = StateSpace::symmetry(3).unwrap();
        let mut rng = Rng::new(4);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            seen.insert(space.index_of(&space.sample_uniform(&mut rng)).unwrap());
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn sample_uniform_is_deterministic_per_seed() {
        let space = StateSpace::symmetry(4).unwrap();
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..100 {
            assert_eq!(space.sample_uniform(&mut a), space.sample_uniform(&mut b));
        }
    }

    #[test]
    fn symmetry_cap_is_an_error_not_a_clamp() {
        assert!(matches!(
            StateSpace::symmetry(9),
            Err(GroupError::SymmetryTooLarge { got: 9, max: 8 })
        ));
        assert!(StateSpace::symmetry(8).is_ok());
        assert!(matches!(
            StateSpace::cyclic(1),
            Err(GroupError::SpaceTooSmall(1))
        ));
    }

    #[test]
    fn enumeration_is_lexicographic_and_rank_consistent() {
        let space = StateSpace::symmetry(4).unwrap();
        assert_eq!(space.order(), 24);
        for (i, g) in space.elements().iter().enumerate() {
            assert_eq!(space.index_of(g).unwrap(), i);
        }
        let mut sorted = space.elements().to_vec();
        sorted.sort_by(|a, b| match (a, b) {
            (GroupElement::Symmetry { image: x }, GroupElement::Symmetry { image: y }) => x.cmp(y),
            _ => unreachable!(),
        });
        assert_eq!(sorted.as_slice(), space.elements());
    }
}
