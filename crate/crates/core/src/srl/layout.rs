//! Assignment of losses to state-vector slices, and the ablation grammar.
//!
//! Grammar: tokens `AE`, `Rew`, `Inv`, `Fwd` (case-insensitive); `+` puts
//! losses on the same slice, `/` starts a new slice. `"AE+Rew/Inv"` is two
//! slices: reconstruction and reward share the first, inverse owns the second.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SrlError;

/// Width given to every slice that carries the inverse loss when the layout
/// has more than one slice.
pub const INVERSE_SLICE_WIDTH: usize = 2;
/// Relative share of the remaining width for slices carrying reconstruction.
const RECONSTRUCTION_SHARE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Reconstruction,
    Reward,
    Inverse,
    Forward,
    /// Regression onto ground truth; only used by the supervised baseline.
    Supervised,
}

impl LossKind {
    pub fn token(self) -> &'static str {
        match self {
            LossKind::Reconstruction => "AE",
            LossKind::Reward => "Rew",
            LossKind::Inverse => "Inv",
            LossKind::Forward => "Fwd",
            LossKind::Supervised => "Sup",
        }
    }

    fn parse_token(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Some(LossKind::Reconstruction),
            "rew" => Some(LossKind::Reward),
            "inv" => Some(LossKind::Inverse),
            "fwd" => Some(LossKind::Forward),
            _ => None,
        }
    }

    /// Losses that need `(s_t, s_t+1)` pairs.
    pub fn needs_next_state(self) -> bool {
        matches!(
            self,
            LossKind::Reward | LossKind::Inverse | LossKind::Forward
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    /// Sorted, without duplicates.
    pub losses: Vec<LossKind>,
    pub start: usize,
    pub end: usize,
}

impl SplitEntry {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitLayout {
    pub entries: Vec<SplitEntry>,
}

/// Parses a grammar string into loss groups, one per slice, in written order.
pub fn parse_groups(spec: &str) -> Result<Vec<Vec<LossKind>>, SrlError> {
    let bad = |m: String| SrlError::Layout(format!("{spec:?}: {m}"));
    let mut groups = Vec::new();
    let mut seen = Vec::new();
    for slice in spec.split('/') {
        let mut group = Vec::new();
        for tok in slice.split('+') {
            let tok = tok.trim();
            if tok.is_empty() {
                return Err(bad("empty loss name".into()));
            }
            let kind = LossKind::parse_token(tok).ok_or_else(|| {
                bad(format!(
                    "unknown loss {tok:?} (expected AE, Rew, Inv or Fwd)"
                ))
            })?;
            if seen.contains(&kind) {
                return Err(bad(format!("{} appears more than once", kind.token())));
            }
            seen.push(kind);
            group.push(kind);
        }
        group.sort();
        groups.push(group);
    }
    Ok(groups)
}

/// Default widths: with one slice it spans everything. Otherwise every slice
/// holding the inverse loss is [`INVERSE_SLICE_WIDTH`] wide and the rest is
/// shared 4:1 between slices with and without reconstruction (largest
/// remainder rounding, at least one dimension each).
pub fn default_widths(groups: &[Vec<LossKind>], state_dim: usize) -> Result<Vec<usize>, SrlError> {
    let n = groups.len();
    if n == 0 {
        return Err(SrlError::Layout("layout has no slices".into()));
    }
    if n == 1 {
        return Ok(vec![state_dim]);
    }
    let has_inv: Vec<bool> = groups
        .iter()
        .map(|g| g.contains(&LossKind::Inverse))
        .collect();
    let n_inv = has_inv.iter().filter(|&&b| b).count();
    let free: Vec<usize> = (0..n).filter(|&i| !has_inv[i]).collect();
    let fixed = if free.is_empty() {
        0
    } else {
        n_inv * INVERSE_SLICE_WIDTH
    };
    let needed = if free.is_empty() {
        n
    } else {
        fixed + free.len()
    };
    if state_dim < needed {
        return Err(SrlError::Layout(format!(
            "state_dim {state_dim} too small for {n} slices (needs at least {needed})"
        )));
    }
    let mut widths = vec![0; n];
    let (targets, shares): (Vec<usize>, Vec<usize>) = if free.is_empty() {
        ((0..n).collect(), vec![1; n])
    } else {
        for i in 0..n {
            if has_inv[i] {
                widths[i] = INVERSE_SLICE_WIDTH;
            }
        }
        let shares = free
            .iter()
            .map(|&i| {
                if groups[i].contains(&LossKind::Reconstruction) {
                    RECONSTRUCTION_SHARE
                } else {
                    1
                }
            })
            .collect();
        (free, shares)
    };
    let remaining = state_dim - fixed;
    let alloc = largest_remainder(remaining, &shares);
    for (&t, a) in targets.iter().zip(alloc) {
        widths[t] = a;
    }
    Ok(widths)
}

/// Splits `total` proportionally to `shares` (floor, then largest remainder,
/// ties to the earlier slot), then moves units from the widest slots so that
/// every slot gets at least one. Requires `total >= shares.len()`.
fn largest_remainder(total: usize, shares: &[usize]) -> Vec<usize> {
    let sum: usize = shares.iter().sum();
    let exact: Vec<f64> = shares
        .iter()
        .map(|&s| total as f64 * s as f64 / sum as f64)
        .collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let left = total - alloc.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        alloc[i] += 1;
    }
    while let Some(empty) = alloc.iter().position(|&a| a == 0) {
        let widest = (0..alloc.len())
            .max_by_key(|&i| (alloc[i], std::cmp::Reverse(i)))
            .unwrap();
        alloc[widest] -= 1;
        alloc[empty] = 1;
    }
    alloc
}

impl SplitLayout {
    pub fn from_groups(groups: Vec<Vec<LossKind>>, widths: &[usize]) -> Result<Self, SrlError> {
        if groups.len() != widths.len() {
            return Err(SrlError::Layout(format!(
                "{} slices but {} widths",
                groups.len(),
                widths.len()
            )));
        }
        let mut start = 0;
        let mut entries = Vec::with_capacity(groups.len());
        for (losses, &w) in groups.into_iter().zip(widths) {
            if w == 0 {
                return Err(SrlError::Layout("slice widths must be positive".into()));
            }
            entries.push(SplitEntry {
                losses,
                start,
                end: start + w,
            });
            start += w;
        }
        Ok(Self { entries })
    }

    /// Parses `spec` and allocates default widths over `state_dim`.
    pub fn parse(spec: &str, state_dim: usize) -> Result<Self, SrlError> {
        let groups = parse_groups(spec)?;
        let widths = default_widths(&groups, state_dim)?;
        Self::from_groups(groups, &widths)
    }

    /// Parses `spec` with explicit widths, which must sum to `state_dim`.
    pub fn parse_with_widths(
        spec: &str,
        widths: &[usize],
        state_dim: usize,
    ) -> Result<Self, SrlError> {
        let layout = Self::from_groups(parse_groups(spec)?, widths)?;
        layout.validate(state_dim)?;
        Ok(layout)
    }

    pub fn state_dim(&self) -> usize {
        self.entries.last().map_or(0, |e| e.end)
    }

    pub fn validate(&self, state_dim: usize) -> Result<(), SrlError> {
        let mut next = 0;
        let mut seen = Vec::new();
        for e in &self.entries {
            if e.start != next || e.end <= e.start {
                return Err(SrlError::Layout(format!(
                    "slices must be contiguous, non-empty and start at 0; got {}..{} after {next}",
                    e.start, e.end
                )));
            }
            for &k in &e.losses {
                if seen.contains(&k) {
                    return Err(SrlError::Layout(format!(
                        "{} assigned to two slices",
                        k.token()
                    )));
                }
                seen.push(k);
            }
            next = e.end;
        }
        if next != state_dim {
            return Err(SrlError::Layout(format!(
                "slices cover 0..{next} but state_dim is {state_dim}"
            )));
        }
        Ok(())
    }

    /// Slice carrying `kind`, if any.
    pub fn range_of(&self, kind: LossKind) -> Option<Range<usize>> {
        self.entries
            .iter()
            .find(|e| e.losses.contains(&kind))
            .map(SplitEntry::range)
    }

    pub fn losses(&self) -> Vec<LossKind> {
        let mut all: Vec<LossKind> = self.entries.iter().flat_map(|e| e.losses.clone()).collect();
        all.sort();
        all
    }

    pub fn has(&self, kind: LossKind) -> bool {
        self.range_of(kind).is_some()
    }

    /// Canonical grammar string (losses inside a slice in canonical order).
    pub fn grammar(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SplitLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .entries
            .iter()
            .map(|e| {
                e.losses
                    .iter()
                    .map(|k| k.token())
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .collect();
        f.write_str(&parts.join("/"))
    }
}
