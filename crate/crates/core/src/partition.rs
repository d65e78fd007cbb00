use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split of a channel axis into one contiguous range per concatenation subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPartition {
    groups: Vec<Range<usize>>,
}

impl ChannelPartition {
    /// Consecutive groups of the given sizes, starting at channel 0.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect();
        Self { groups }
    }

    pub fn from_ranges(groups: Vec<Range<usize>>) -> Self {
        Self { groups }
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Total channels covered.
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Checks that the groups cover `0..channels` exactly once.
    pub fn validate(&self, channels: usize) -> Result<()> {
        let mut seen = vec![false; channels];
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::Contract(format!("empty group {g:?}")));
            }
            for c in g.clone() {
                match seen.get_mut(c) {
                    None => {
                        return Err(Error::Contract(format!(
                            "group {g:?} exceeds {channels} channels"
                        )))
                    }
                    Some(true) => {
                        return Err(Error::Contract(format!("channel {c} in two groups")))
                    }
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("channel {c} not covered")));
        }
        Ok(())
    }

    /// Group index owning channel `c`.
    pub fn group_of(&self, c: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let p = ChannelPartition::from_sizes(&[2, 3]);
        assert_eq!(p.groups(), &[0..2, 2..5]);
        assert!(p.validate(5).is_ok());
        assert_eq!(p.group_of(4), Some(1));
    }

    #[test]
    fn overlap_and_gaps() {
        assert!(ChannelPartition::from_ranges(vec![0..3, 2..5]).validate(5).is_err());
        assert!(ChannelPartition::from_ranges(vec![0..2, 3..5]).validate(5).is_err());
        assert!(ChannelPartition::from_ranges(vec![0..2, 2..6]).validate(5).is_err());
        assert!(ChannelPartition::from_ranges(vec![2..5, 0..2]).validate(5).is_ok());
    }
}
