//! Collapse maps of the Duhamel expansion and the move game that reorders them.
//!
//! A collapse map of base order `r` and depth `n` stores one pick per column:
//! `picks[c-1]` is the particle slot that column `c` contracts onto, with
//! `1 <= picks[c-1] <= r + 2c - 2`. Column `c` contracts slots
//! `r + 2c - 1, r + 2c`.
//!
//! A board additionally records which time variable sits on top of each
//! column. `top[c-1] = q` means column `c` carries `t_{r+2q}`; the permutation
//! `sigma` is the inverse of `top`, so the time simplex of a member reads
//! `t_r >= u_{sigma(1)} >= ... >= u_{sigma(n)}` in the canonical column variables.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Default bound on the number of enumerated maps.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CollapseMap {
    pub r: usize,
    pub n: usize,
    pub picks: Vec<usize>,
}

impl CollapseMap {
    pub fn new(r: usize, picks: Vec<usize>) -> Result<Self> {
        let map = CollapseMap {
            r,
            n: picks.len(),
            picks,
        };
        map.validate()?;
        Ok(map)
    }

    /// Largest admissible pick of column `c` (1-based).
    pub fn column_height(r: usize, c: usize) -> usize {
        r + 2 * c - 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.n == 0 {
            return Err(Error::invalid(format!(
                "need r >= 1 and n >= 1, got r={}, n={}",
                self.r, self.n
            )));
        }
        let bad: Vec<String> = self
            .picks
            .iter()
            .enumerate()
            .filter(|(i, &p)| p == 0 || p > Self::column_height(self.r, i + 1))
            .map(|(i, &p)| {
                format!(
                    "column {} pick {p} outside 1..={}",
                    i + 1,
                    Self::column_height(self.r, i + 1)
                )
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    /// No later column picks a row strictly above an earlier column's row.
    pub fn is_echelon(&self) -> bool {
        self.picks.windows(2).all(|w| w[0] <= w[1])
    }

    /// Column `j` (1-based) may be moved when `picks[j+1] < picks[j]`.
    pub fn move_enabled(&self, j: usize) -> bool {
        j >= 1 && j < self.n && self.picks[j] < self.picks[j - 1]
    }

    pub fn enabled_moves(&self) -> Vec<usize> {
        (1..self.n).filter(|&j| self.move_enabled(j)).collect()
    }

    pub fn label(&self) -> String {
        let p: Vec<String> = self.picks.iter().map(|p| p.to_string()).collect();
        p.join("-")
    }
}

/// `prod_{c=1}^n (r + 2c - 2)`, saturating.
pub fn map_count(r: usize, n: usize) -> u64 {
    (1..=n).fold(1u64, |acc, c| {
        acc.saturating_mul(CollapseMap::column_height(r, c) as u64)
    })
}

/// All maps in lexicographic order of `picks`.
pub fn enumerate_maps(r: usize, n: usize, cap: u64) -> Result<Vec<CollapseMap>> {
    if r == 0 || n == 0 {
        return Err(Error::invalid(format!("need r >= 1 and n >= 1, got r={r}, n={n}")));
    }
    let total = map_count(r, n);
    if total > cap {
        return Err(Error::cap(format!("collapse maps for r={r}, n={n}"), total, cap));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut picks = vec![1usize; n];
    loop {
        out.push(CollapseMap {
            r,
            n,
            picks: picks.clone(),
        });
        let mut c = n;
        loop {
            if c == 0 {
                return Ok(out);
            }
            if picks[c - 1] < CollapseMap::column_height(r, c) {
                picks[c - 1] += 1;
                break;
            }
            picks[c - 1] = 1;
            c -= 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct BoardState {
    pub map: CollapseMap,
    /// `top[c-1]`: index `q` of the time `t_{r+2q}` carried by column `c`.
    pub top: Vec<usize>,
}

impl BoardState {
    pub fn initial(map: CollapseMap) -> Self {
        let top = (1..=map.n).collect();
        BoardState { map, top }
    }

    /// `sigma = top^{-1}`, 1-based.
    pub fn sigma(&self) -> Vec<usize> {
        let mut s = vec![0; self.top.len()];
        for (c, &q) in self.top.iter().enumerate() {
            s[q - 1] = c + 1;
        }
        s
    }

    /// Time chain of the member: column indices in decreasing time order.
    pub fn chain(&self) -> Vec<usize> {
        self.sigma()
    }
}

/// Applies the move at column `j`: swaps the picks of columns `j, j+1`,
/// relabels rows `r+2j-1 <-> r+2j+1` and `r+2j <-> r+2j+2` in every later
/// column, and swaps the two columns' time labels.
pub fn acceptable_move(state: &BoardState, j: usize) -> Result<BoardState> {
    let map = &state.map;
    if j == 0 || j >= map.n {
        return Err(Error::invalid(format!(
            "move column {j} out of range 1..={}",
            map.n.saturating_sub(1)
        )));
    }
    if !map.move_enabled(j) {
        return Err(Error::invalid(format!(
            "move at column {j} not enabled: picks {} then {}",
            map.picks[j - 1],
            map.picks[j]
        )));
    }
    let r = map.r;
    let mut picks = map.picks.clone();
    picks.swap(j - 1, j);
    let (a, b) = (r + 2 * j - 1, r + 2 * j + 1);
    let (c, d) = (r + 2 * j, r + 2 * j + 2);
    for p in picks.iter_mut().skip(j + 1) {
        *p = match *p {
            x if x == a => b,
            x if x == b => a,
            x if x == c => d,
            x if x == d => c,
            x => x,
        };
    }
    let mut top = state.top.clone();
    top.swap(j - 1, j);
    let next = BoardState {
        map: CollapseMap {
            r,
            n: map.n,
            picks,
        },
        top,
    };
    debug_assert!(next.map.validate().is_ok());
    Ok(next)
}

/// Move budget `n^2 (r + 2n)`.
pub fn default_move_budget(r: usize, n: usize) -> usize {
    n * n * (r + 2 * n)
}

/// Outcome of canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Canonical {
    pub state: BoardState,
    pub moves: usize,
}

fn run_moves<F: FnMut(&[usize]) -> usize>(
    map: &CollapseMap,
    budget: usize,
    mut choose: F,
) -> Result<Canonical> {
    let mut state = BoardState::initial(map.clone());
    let mut moves = 0;
    loop {
        let enabled = state.map.enabled_moves();
        if enabled.is_empty() {
            return Ok(Canonical { state, moves });
        }
        if moves == budget {
            return Err(Error::numerical(format!(
                "canonicalization of {} exceeded the budget of {budget} moves",
                map.label()
            )));
        }
        let j = choose(&enabled);
        state = acceptable_move(&state, j)?;
        moves += 1;
    }
}

/// Deterministic canonicalization: always move at the smallest enabled column.
pub fn to_echelon(map: &CollapseMap, budget: usize) -> Result<Canonical> {
    map.validate()?;
    run_moves(map, budget, |e| e[0])
}

/// Canonicalization with uniformly random choices among enabled moves.
pub fn to_echelon_random<R: Rng + ?Sized>(
    map: &CollapseMap,
    budget: usize,
    rng: &mut R,
) -> Result<Canonical> {
    map.validate()?;
    run_moves(map, budget, |e| e[rng.gen_range(0..e.len())])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMember {
    pub map: CollapseMap,
    pub sigma: Vec<usize>,
    pub moves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EchelonClassReport {
    pub canonical: CollapseMap,
    pub members: Vec<ClassMember>,
    /// One decreasing time chain (column indices) per member.
    pub domain: Vec<Vec<usize>>,
}

impl EchelonClassReport {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Members' simplices are disjoint iff their orderings differ.
    pub fn sigmas_distinct(&self) -> bool {
        let mut s: Vec<&Vec<usize>> = self.members.iter().map(|m| &m.sigma).collect();
        s.sort();
        s.windows(2).all(|w| w[0] != w[1])
    }
}

/// Partition of all maps by canonical form, classes ordered by canonical picks.
pub fn equivalence_classes(
    r: usize,
    n: usize,
    cap: u64,
    budget: usize,
) -> Result<Vec<EchelonClassReport>> {
    let mut classes: BTreeMap<CollapseMap, Vec<ClassMember>> = BTreeMap::new();
    for map in enumerate_maps(r, n, cap)? {
        let c = to_echelon(&map, budget)?;
        let sigma = c.state.sigma();
        classes.entry(c.state.map).or_default().push(ClassMember {
            map,
            sigma,
            moves: c.moves,
        });
    }
    Ok(classes
        .into_iter()
        .map(|(canonical, members)| EchelonClassReport {
            domain: members.iter().map(|m| m.sigma.clone()).collect(),
            canonical,
            members,
        })
        .collect())
}

pub fn count_echelon(r: usize, n: usize, cap: u64) -> Result<u64> {
    Ok(enumerate_maps(r, n, cap)?
        .iter()
        .filter(|m| m.is_echelon())
        .count() as u64)
}

/// `2^{r + 3n - 2}`.
pub fn echelon_bound(r: usize, n: usize) -> u128 {
    1u128 << (r + 3 * n - 2)
}

/// `P_1 = 1`, `P_n = 1 + P_1 + ... + P_{n-1}`.
pub fn partition_count(n: usize) -> Result<u128> {
    if n == 0 {
        return Err(Error::invalid("partition count needs n >= 1"));
    }
    if n > 127 {
        return Err(Error::invalid("partition count overflows beyond n = 127"));
    }
    let mut p: Vec<u128> = vec![1];
    for _ in 1..n {
        p.push(1 + p.iter().sum::<u128>());
    }
    Ok(p[n - 1])
}

fn binomial(n: u64, k: u64) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Cross-check bound `P_n sum_{i=1}^n C(r + 2n - 2, i)`.
pub fn binomial_sum_bound(r: usize, n: usize) -> Result<u128> {
    let top = (r + 2 * n - 2) as u64;
    let s: u128 = (1..=n as u64).map(|i| binomial(top, i)).sum();
    Ok(partition_count(n)? * s)
}

/// `2^n Gamma(r/2 + n) / Gamma(r/2)` through log-gamma.
pub fn map_count_gamma_form(r: usize, n: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let h = 0.5 * r as f64;
    2f64.powi(n as i32) * (ln_gamma(h + n as f64) - ln_gamma(h)).exp()
}

/// Summary line of one `(r, n)` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoardSummary {
    pub r: usize,
    pub n: usize,
    pub map_count: u64,
    pub class_count: usize,
    pub echelon_count: u64,
    pub bound: u128,
    pub within_bound: bool,
    pub binomial_bound: u128,
    pub max_moves: usize,
    pub all_sigmas_distinct: bool,
}

pub fn summarize(r: usize, n: usize, classes: &[EchelonClassReport], echelon_count: u64) -> Result<BoardSummary> {
    let bound = echelon_bound(r, n);
    Ok(BoardSummary {
        r,
        n,
        map_count: classes.iter().map(|c| c.size() as u64).sum(),
        class_count: classes.len(),
        echelon_count,
        bound,
        within_bound: (echelon_count as u128) <= bound,
        binomial_bound: binomial_sum_bound(r, n)?,
        max_moves: classes
            .iter()
            .flat_map(|c| c.members.iter().map(|m| m.moves))
            .max()
            .unwrap_or(0),
        all_sigmas_distinct: classes.iter().all(|c| c.sigmas_distinct()),
    })
}

fn sigma_text(s: &[usize]) -> String {
    s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
}

/// CSV with columns `canonical_id,class_size,sigma_list,echelon_count,bound,within_bound`.
/// `canonical_id` is the dash-joined picks and `sigma_list` a `;`-separated list.
pub fn write_class_csv<W: Write>(mut w: W, classes: &[EchelonClassReport], echelon_count: u64, bound: u128) -> Result<()> {
    writeln!(w, "canonical_id,class_size,sigma_list,echelon_count,bound,within_bound")?;
    for c in classes {
        let sigmas: Vec<String> = c.members.iter().map(|m| sigma_text(&m.sigma)).collect();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.canonical.label(),
            c.size(),
            sigmas.join(";"),
            echelon_count,
            bound,
            (echelon_count as u128) <= bound
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CAP: u64 = DEFAULT_ENUMERATION_CAP;

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_maps(1, 1, CAP).unwrap().len(), 1);
        assert_eq!(enumerate_maps(1, 2, CAP).unwrap().len(), 3);
        let maps = enumerate_maps(2, 3, CAP).unwrap();
        assert_eq!(maps.len(), 48);
        assert!(maps.windows(2).all(|w| w[0].picks < w[1].picks));
        assert!(enumerate_maps(3, 4, 100).is_err());
        assert!(enumerate_maps(0, 2, CAP).is_err());
    }

    #[test]
    fn echelon_examples() {
        assert!(CollapseMap::new(1, vec![1, 2, 4]).unwrap().is_echelon());
        assert!(!CollapseMap::new(2, vec![2, 1]).unwrap().is_echelon());
        assert!(CollapseMap::new(3, vec![2]).unwrap().is_echelon());
        assert!(CollapseMap::new(1, vec![2]).is_err());
    }

    #[test]
    fn single_move_r2_n2() {
        let s = BoardState::initial(CollapseMap::new(2, vec![2, 1]).unwrap());
        let t = acceptable_move(&s, 1).unwrap();
        assert_eq!(t.map.picks, vec![1, 2]);
        assert_eq!(t.top, vec![2, 1]);
        assert!(acceptable_move(&t, 1).is_err());
        let c = to_echelon(&s.map, default_move_budget(2, 2)).unwrap();
        assert_eq!(c.state.map.picks, vec![1, 2]);
        assert_eq!(c.state.sigma(), vec![2, 1]);
    }

    #[test]
    fn r1_n2_has_no_moves() {
        for m in enumerate_maps(1, 2, CAP).unwrap() {
            assert!(m.enabled_moves().is_empty());
            assert!(acceptable_move(&BoardState::initial(m), 1).is_err());
        }
    }

    #[test]
    fn row_relabelling_r2_n3() {
        // Rows r+2j-1 = 3 <-> 5 and r+2j = 4 <-> 6 for j = 1, r = 2.
        let cases = [
            (vec![2, 1, 3], vec![1, 2, 5]),
            (vec![2, 1, 4], vec![1, 2, 6]),
            (vec![2, 1, 5], vec![1, 2, 3]),
            (vec![2, 1, 6], vec![1, 2, 4]),
            (vec![2, 1, 1], vec![1, 2, 1]),
        ];
        for (before, after) in cases {
            let s = BoardState::initial(CollapseMap::new(2, before).unwrap());
            assert_eq!(acceptable_move(&s, 1).unwrap().map.picks, after);
        }
        // j = 2 has no later column to relabel.
        let s = BoardState::initial(CollapseMap::new(2, vec![1, 4, 3]).unwrap());
        let t = acceptable_move(&s, 2).unwrap();
        assert_eq!(t.map.picks, vec![1, 3, 4]);
        assert_eq!(t.top, vec![1, 3, 2]);
    }

    #[test]
    fn exhaustive_small_boards() {
        for r in 1..=3 {
            for n in 1..=4 {
                let budget = default_move_budget(r, n);
                let classes = equivalence_classes(r, n, CAP, budget).unwrap();
                let total: usize = classes.iter().map(|c| c.size()).sum();
                assert_eq!(total as u64, map_count(r, n));
                assert!(classes.iter().all(|c| c.canonical.is_echelon() && c.sigmas_distinct()));
                let e = count_echelon(r, n, CAP).unwrap();
                assert_eq!(classes.len() as u64, e);
                assert!(e as u128 <= echelon_bound(r, n));
                assert!(e as u128 <= binomial_sum_bound(r, n).unwrap());
            }
        }
    }

    #[test]
    fn random_orders_are_confluent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in enumerate_maps(2, 4, CAP).unwrap() {
            let budget = default_move_budget(2, 4);
            let det = to_echelon(&m, budget).unwrap();
            for _ in 0..5 {
                let rnd = to_echelon_random(&m, budget, &mut rng).unwrap();
                assert_eq!(rnd.state, det.state, "map {}", m.label());
            }
        }
    }

    #[test]
    fn echelon_maps_are_fixed() {
        let m = CollapseMap::new(1, vec![1, 2, 4]).unwrap();
        let c = to_echelon(&m, 1).unwrap();
        assert_eq!(c.state.map, m);
        assert_eq!(c.state.sigma(), vec![1, 2, 3]);
        assert_eq!(c.moves, 0);
    }

    #[test]
    fn budget_exhaustion_is_an_error() {
        let m = CollapseMap::new(3, vec![3, 2, 1]).unwrap();
        assert!(to_echelon(&m, 0).is_err());
    }

    #[test]
    fn partition_counts() {
        assert_eq!(partition_count(1).unwrap(), 1);
        assert_eq!(partition_count(3).unwrap(), 4);
        for n in 1..=20 {
            let p = partition_count(n).unwrap();
            assert_eq!(p, 1u128 << (n - 1));
            assert!(p <= 1u128 << n);
        }
        assert!(partition_count(0).is_err());
    }

    #[test]
    fn gamma_form_of_map_count() {
        for r in 1..=6 {
            for n in 1..=8 {
                let exact = map_count(r, n) as f64;
                let g = map_count_gamma_form(r, n);
                assert!((g - exact).abs() <= 1e-12 * exact, "r={r} n={n}: {g} vs {exact}");
            }
        }
    }

    #[test]
    fn csv_layout() {
        let classes = equivalence_classes(2, 2, CAP, 16).unwrap();
        let mut buf = Vec::new();
        write_class_csv(&mut buf, &classes, 7, echelon_bound(2, 2)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("canonical_id,class_size,sigma_list,echelon_count,bound,within_bound\n"));
        assert!(text.contains("1-2,2,1-2;2-1,7,64,true"));
    }
}
