//! Hierarchical aggregation structure.
//!
//! A [`HierarchySpec`] names the bottom series and declares levels, each a
//! partition of the bottom series into labelled groups. Grouped hierarchies
//! are expressed by declaring several independent levels over the same
//! bottom set. [`AggregationMatrix`] stacks one row per aggregate node above
//! the identity, so `S · bottom` yields every series in the hierarchy.
//!
//! Row order is fixed: the total row (if any), then each level in
//! declaration order with its groups sorted by label, then the bottom
//! series in `bottom_ids` order.
//!
//! Spec files are TOML:
//!
//! ```toml
//! bottom_ids = ["a", "b", "c", "d"]
//! top_included = true
//!
//! [levels.halves]
//! left = ["a", "b"]
//! right = ["c", "d"]
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOTAL_LEVEL: &str = "total";
pub const BOTTOM_LEVEL: &str = "bottom";
pub const OVERALL_LEVEL: &str = "overall";

/// One named level: group label -> member bottom ids.
pub type Level = IndexMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub bottom_ids: Vec<String>,
    #[serde(default)]
    pub levels: IndexMap<String, Level>,
    #[serde(default = "default_top")]
    pub top_included: bool,
}

fn default_top() -> bool {
    true
}

impl HierarchySpec {
    pub fn new(bottom_ids: Vec<String>, top_included: bool) -> Self {
        Self {
            bottom_ids,
            levels: IndexMap::new(),
            top_included,
        }
    }

    /// Add a level given as `(group label, member ids)` pairs.
    pub fn with_level<I, G, M>(mut self, name: &str, groups: I) -> Self
    where
        I: IntoIterator<Item = (G, Vec<M>)>,
        G: Into<String>,
        M: Into<String>,
    {
        let level = groups
            .into_iter()
            .map(|(g, ms)| (g.into(), ms.into_iter().map(Into::into).collect()))
            .collect();
        self.levels.insert(name.to_string(), level);
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: HierarchySpec =
            toml::from_str(text).map_err(|e| Error::Hierarchy(format!("malformed spec file: {}", e.to_string().trim_end())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("hierarchy spec serializes")
    }

    pub fn n_bottom(&self) -> usize {
        self.bottom_ids.len()
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.bottom_ids.is_empty() {
            return Err(Error::Hierarchy("bottom_ids is empty".into()));
        }
        let mut seen = HashSet::new();
        for id in &self.bottom_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Hierarchy(format!("duplicate bottom id '{}'", id)));
            }
        }
        for (name, level) in &self.levels {
            if [TOTAL_LEVEL, BOTTOM_LEVEL, OVERALL_LEVEL].contains(&name.as_str()) {
                return Err(Error::Hierarchy(format!("level name '{}' is reserved", name)));
            }
            if level.is_empty() {
                return Err(Error::Hierarchy(format!("level '{}' is empty", name)));
            }
            let mut covered: HashSet<&str> = HashSet::new();
            for (group, members) in level {
                if members.is_empty() {
                    return Err(Error::Hierarchy(format!("group '{}' in level '{}' is empty", group, name)));
                }
                for m in members {
                    if !seen.contains(m.as_str()) {
                        return Err(Error::Hierarchy(format!(
                            "level '{}' group '{}' references unknown bottom id '{}'",
                            name, group, m
                        )));
                    }
                    if !covered.insert(m.as_str()) {
                        return Err(Error::Hierarchy(format!(
                            "bottom id '{}' appears more than once in level '{}'",
                            m, name
                        )));
                    }
                }
            }
            if covered.len() != self.bottom_ids.len() {
                let missing = self.bottom_ids.iter().find(|id| !covered.contains(id.as_str())).unwrap();
                return Err(Error::Hierarchy(format!(
                    "bottom id '{}' is not assigned to any group of level '{}'",
                    missing, name
                )));
            }
        }
        Ok(())
    }
}

/// Binary indicator over the rows of `S` selecting one hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMask {
    pub name: String,
    pub mask: Vec<bool>,
    pub count: usize,
}

impl LevelMask {
    fn from_rows(name: &str, n_rows: usize, rows: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = vec![false; n_rows];
        for r in rows {
            mask[r] = true;
        }
        let count = mask.iter().filter(|&&m| m).count();
        Self {
            name: name.to_string(),
            mask,
            count,
        }
    }

    /// Mask selecting every row.
    pub fn overall(n_rows: usize) -> Self {
        Self::from_rows(OVERALL_LEVEL, n_rows, 0..n_rows)
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

/// Dense binary constraint matrix `S = [A; I]`, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMatrix {
    n_bottom: usize,
    data: Vec<f64>,
    row_labels: Vec<String>,
    row_levels: Vec<String>,
    members: Vec<Vec<usize>>,
}

impl AggregationMatrix {
    /// Build `S` from a validated spec.
    pub fn build(spec: &HierarchySpec) -> Result<Self> {
        spec.validate()?;
        let nb = spec.n_bottom();
        let col: HashMap<&str, usize> = spec
            .bottom_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();

        let mut row_labels = Vec::new();
        let mut row_levels = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        if spec.top_included {
            row_labels.push(TOTAL_LEVEL.to_string());
            row_levels.push(TOTAL_LEVEL.to_string());
            members.push((0..nb).collect());
        }
        for (name, level) in &spec.levels {
            let mut groups: Vec<(&String, &Vec<String>)> = level.iter().collect();
            groups.sort_by(|a, b| a.0.cmp(b.0));
            for (label, ids) in groups {
                let mut cols: Vec<usize> = ids.iter().map(|id| col[id.as_str()]).collect();
                cols.sort_unstable();
                row_labels.push(format!("{}/{}", name, label));
                row_levels.push(name.clone());
                members.push(cols);
            }
        }
        for (i, id) in spec.bottom_ids.iter().enumerate() {
            row_labels.push(id.clone());
            row_levels.push(BOTTOM_LEVEL.to_string());
            members.push(vec![i]);
        }

        let n_rows = members.len();
        let mut data = vec![0.0; n_rows * nb];
        for (r, cols) in members.iter().enumerate() {
            for &c in cols {
                data[r * nb + c] = 1.0;
            }
        }
        Ok(Self {
            n_bottom: nb,
            data,
            row_labels,
            row_levels,
            members,
        })
    }

    /// Total number of series, `N_a + N_b`.
    pub fn n_rows(&self) -> usize {
        self.members.len()
    }

    pub fn n_bottom(&self) -> usize {
        self.n_bottom
    }

    pub fn n_aggregate(&self) -> usize {
        self.n_rows() - self.n_bottom
    }

    /// Row-major `(N_a + N_b) × N_b` entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_bottom + col]
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    /// Level name of every row.
    pub fn row_levels(&self) -> &[String] {
        &self.row_levels
    }

    /// Bottom columns summed by `row`, ascending.
    pub fn members(&self, row: usize) -> &[usize] {
        &self.members[row]
    }

    /// `S · bottom`, where `bottom` is row-major `N_b × width`.
    ///
    /// The bottom block of the result is a verbatim copy of the input.
    pub fn aggregate(&self, bottom: &[f64], width: usize) -> Result<Vec<f64>> {
        if width == 0 || bottom.len() != self.n_bottom * width {
            return Err(Error::shape(
                "aggregate",
                format!(
                    "expected {} x {} bottom values, got {}",
                    self.n_bottom,
                    width,
                    bottom.len()
                ),
            ));
        }
        let mut out = vec![0.0; self.n_rows() * width];
        let na = self.n_aggregate();
        for (r, cols) in self.members[..na].iter().enumerate() {
            let dst = &mut out[r * width..(r + 1) * width];
            for &c in cols {
                for (d, s) in dst.iter_mut().zip(&bottom[c * width..(c + 1) * width]) {
                    *d += s;
                }
            }
        }
        out[na * width..].copy_from_slice(bottom);
        Ok(out)
    }

    /// Masks for the total row (when present), each declared level and the
    /// bottom level, in row order.
    pub fn level_masks(&self) -> Vec<LevelMask> {
        let mut names: Vec<&str> = Vec::new();
        for l in &self.row_levels {
            if !names.contains(&l.as_str()) {
                names.push(l);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let rows = self.row_levels.iter().enumerate().filter(|(_, l)| *l == name).map(|(i, _)| i);
                LevelMask::from_rows(name, self.n_rows(), rows)
            })
            .collect()
    }

    pub fn overall_mask(&self) -> LevelMask {
        LevelMask::overall(self.n_rows())
    }

    /// Look up a mask by name, including `overall`.
    pub fn mask(&self, name: &str) -> Option<LevelMask> {
        if name == OVERALL_LEVEL {
            return Some(self.overall_mask());
        }
        self.level_masks().into_iter().find(|m| m.name == name)
    }
}

/// Masks for a spec, as [`AggregationMatrix::level_masks`].
pub fn level_masks(spec: &HierarchySpec) -> Result<Vec<LevelMask>> {
    Ok(AggregationMatrix::build(spec)?.level_masks())
}

impl fmt::Display for AggregationMatrix {
    /// Matrix with a horizontal rule between levels, one row per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label_w = self.row_labels.iter().map(String::len).max().unwrap_or(0);
        let rule = "-".repeat(label_w + 3 + 2 * self.n_bottom);
        for r in 0..self.n_rows() {
            if r > 0 && self.row_levels[r] != self.row_levels[r - 1] {
                writeln!(f, "{}", rule)?;
            }
            write!(f, "{:<w$} |", self.row_labels[r], w = label_w)?;
            for c in 0..self.n_bottom {
                write!(f, " {}", self.get(r, c) as u8)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn fig1_spec() -> HierarchySpec {
        HierarchySpec::new(vec!["1".into(), "2".into(), "3".into(), "4".into()], true)
            .with_level("halves", [("A", vec!["1", "2"]), ("B", vec!["3", "4"])])
    }

    fn mask_vec(m: &LevelMask) -> Vec<u8> {
        m.mask.iter().map(|&b| b as u8).collect()
    }

    #[test]
    fn fig1_matrix() {
        let s = AggregationMatrix::build(&fig1_spec()).unwrap();
        #[rustfmt::skip]
        let expect = [
            1., 1., 1., 1.,
            1., 1., 0., 0.,
            0., 0., 1., 1.,
            1., 0., 0., 0.,
            0., 1., 0., 0.,
            0., 0., 1., 0.,
            0., 0., 0., 1.,
        ];
        assert_eq!(s.as_slice(), &expect);
        assert_eq!(s.row_labels(), &["total", "halves/A", "halves/B", "1", "2", "3", "4"]);
        assert_eq!(s.n_aggregate(), 3);
    }

    #[test]
    fn degenerate_and_singleton_hierarchies() {
        let one = AggregationMatrix::build(&HierarchySpec::new(vec!["x".into()], true)).unwrap();
        assert_eq!(one.as_slice(), &[1.0, 1.0]);

        let spec = HierarchySpec::new(vec!["a".into(), "b".into(), "c".into()], true)
            .with_level("single", [("a", vec!["a"]), ("b", vec!["b"]), ("c", vec!["c"])]);
        let s = AggregationMatrix::build(&spec).unwrap();
        assert_eq!(s.n_rows(), 7);
        for r in 0..3 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert_eq!(s.get(1 + r, c), e);
                assert_eq!(s.get(4 + r, c), e);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let dup = HierarchySpec::new(vec!["a".into(), "a".into()], true);
        assert!(matches!(AggregationMatrix::build(&dup), Err(Error::Hierarchy(m)) if m.contains("duplicate")));
        let unknown = HierarchySpec::new(vec!["a".into(), "b".into()], true)
            .with_level("l", [("g", vec!["a", "b", "z"])]);
        assert!(matches!(AggregationMatrix::build(&unknown), Err(Error::Hierarchy(m)) if m.contains("unknown")));
        let mut empty = HierarchySpec::new(vec!["a".into()], true);
        empty.levels.insert("l".into(), IndexMap::new());
        assert!(matches!(AggregationMatrix::build(&empty), Err(Error::Hierarchy(m)) if m.contains("empty")));
        let partial = HierarchySpec::new(vec!["a".into(), "b".into()], true).with_level("l", [("g", vec!["a"])]);
        assert!(AggregationMatrix::build(&partial).is_err());
        let twice = HierarchySpec::new(vec!["a".into(), "b".into()], true)
            .with_level("l", [("g", vec!["a", "b"]), ("h", vec!["a"])]);
        assert!(AggregationMatrix::build(&twice).is_err());
    }

    #[test]
    fn aggregate_fig1() {
        let s = AggregationMatrix::build(&fig1_spec()).unwrap();
        assert_eq!(s.aggregate(&[1., 2., 3., 4.], 1).unwrap(), vec![10., 3., 7., 1., 2., 3., 4.]);
        assert_eq!(s.aggregate(&[0.; 4], 1).unwrap(), vec![0.; 7]);
        assert!(s.aggregate(&[1., 2., 3.], 1).is_err());
    }

    #[test]
    fn aggregate_matches_row_sum_oracle() {
        let spec = HierarchySpec::new((0..6).map(|i| i.to_string()).collect(), true)
            .with_level("pairs", [("p0", vec!["0", "1"]), ("p1", vec!["2", "3"]), ("p2", vec!["4", "5"])])
            .with_level("odd_even", [("even", vec!["0", "2", "4"]), ("odd", vec!["1", "3", "5"])]);
        let s = AggregationMatrix::build(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let width = 100;
        let bottom: Vec<f64> = (0..6 * width).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = s.aggregate(&bottom, width).unwrap();
        for r in 0..s.n_rows() {
            for w in 0..width {
                let oracle: f64 = (0..6).filter(|&c| s.get(r, c) == 1.0).map(|c| bottom[c * width + w]).sum();
                assert!((out[r * width + w] - oracle).abs() <= 1e-12);
            }
        }
        assert_eq!(&out[s.n_aggregate() * width..], bottom.as_slice());
    }

    #[test]
    fn masks_follow_row_order() {
        let s = AggregationMatrix::build(&fig1_spec()).unwrap();
        let masks = s.level_masks();
        let names: Vec<&str> = masks.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["total", "halves", "bottom"]);
        assert_eq!(mask_vec(&masks[0]), [1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(mask_vec(&masks[1]), [0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(mask_vec(&masks[2]), [0, 0, 0, 1, 1, 1, 1]);
        let overall = s.overall_mask();
        assert_eq!(overall.count, 7);
        let union: Vec<bool> = (0..7).map(|r| masks.iter().any(|m| m.mask[r])).collect();
        assert_eq!(union, overall.mask);
        // union agrees with row labels: every row label belongs to exactly one mask
        for r in 0..7 {
            assert_eq!(masks.iter().filter(|m| m.mask[r]).count(), 1, "row {}", s.row_labels()[r]);
        }
    }

    #[test]
    fn toml_round_trip_and_declaration_order() {
        let text = r#"
bottom_ids = ["a", "b", "c", "d"]
top_included = true

[levels.zeta]
z2 = ["c", "d"]
z1 = ["a", "b"]

[levels.alpha]
one = ["a", "b", "c", "d"]
"#;
        let spec = HierarchySpec::from_toml_str(text).unwrap();
        let s = AggregationMatrix::build(&spec).unwrap();
        assert_eq!(&s.row_labels()[..4], &["total", "zeta/z1", "zeta/z2", "alpha/one"]);
        let again = HierarchySpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(again, spec);
        let err = HierarchySpec::from_toml_str("bottom_ids = 3").unwrap_err();
        assert!(err.to_string().contains("bottom_ids"), "{}", err);
    }

    #[test]
    fn display_has_level_separators() {
        let s = AggregationMatrix::build(&fig1_spec()).unwrap();
        let text = s.to_string();
        assert_eq!(text.lines().count(), 9);
        assert_eq!(text.lines().filter(|l| l.starts_with('-')).count(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn arb_spec() -> impl Strategy<Value = HierarchySpec> {
            (1usize..8, 1usize..4, any::<bool>(), any::<u64>()).prop_map(|(nb, nlev, top, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ids: Vec<String> = (0..nb).map(|i| format!("s{}", i)).collect();
                let mut spec = HierarchySpec::new(ids.clone(), top);
                for l in 0..nlev {
                    let k = rng.random_range(1..=nb);
                    let mut level = Level::new();
                    for id in &ids {
                        let g = format!("g{}", rng.random_range(0..k));
                        level.entry(g).or_default().push(id.clone());
                    }
                    spec.levels.insert(format!("level{}", l), level);
                }
                spec
            })
        }

        proptest! {
            #[test]
            fn structure_invariants(spec in arb_spec()) {
                let s = AggregationMatrix::build(&spec).unwrap();
                let nb = s.n_bottom();
                prop_assert!(s.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
                for r in 0..nb {
                    for c in 0..nb {
                        prop_assert_eq!(s.get(s.n_aggregate() + r, c), if r == c { 1.0 } else { 0.0 });
                    }
                }
                for r in 0..s.n_aggregate() {
                    prop_assert!((0..nb).any(|c| s.get(r, c) == 1.0));
                }
            }

            #[test]
            fn aggregate_is_linear(spec in arb_spec(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let s = AggregationMatrix::build(&spec).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let nb = s.n_bottom();
                let x: Vec<f64> = (0..nb).map(|_| rng.random_range(-10.0..10.0)).collect();
                let y: Vec<f64> = (0..nb).map(|_| rng.random_range(-10.0..10.0)).collect();
                let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
                let lhs = s.aggregate(&combo, 1).unwrap();
                let (sx, sy) = (s.aggregate(&x, 1).unwrap(), s.aggregate(&y, 1).unwrap());
                for i in 0..lhs.len() {
                    prop_assert!((lhs[i] - (a * sx[i] + b * sy[i])).abs() <= 1e-12 * (1.0 + lhs[i].abs()));
                }
                // aggregate rows equal A·v
                for (r, &sr) in sx.iter().enumerate().take(s.n_aggregate()) {
                    let av: f64 = (0..nb).map(|c| s.get(r, c) * x[c]).sum();
                    prop_assert!((sr - av).abs() <= 1e-12 * (1.0 + av.abs()));
                }
            }
        }
    }
}
