use std::fmt;

/// Sorted, duplicate-free set of class indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSet(Vec<usize>);

impl LabelSet {
    pub fn new(mut classes: Vec<usize>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        LabelSet(classes)
    }

    pub fn empty() -> Self {
        LabelSet(Vec::new())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    pub fn max_class(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// Size of the intersection, by merging the two sorted lists.
    pub fn intersection_len(&self, other: &LabelSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// 0/1 indicator row of length `num_classes`.
    pub fn to_indicator(&self, num_classes: usize) -> Vec<f64> {
        let mut row = vec![0.0; num_classes];
        for &c in &self.0 {
            row[c] = 1.0;
        }
        row
    }
}

impl FromIterator<usize> for LabelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        LabelSet::new(iter.into_iter().collect())
    }
}

/// Space-separated indices, the annotation-list form used in CSV exports.
impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}
