use crate::error::{Error, Result};

/// Positions of visual and text tokens in a length-`n_total` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    n_total: usize,
    visual_indices: Vec<usize>,
    text_indices: Vec<usize>,
}

impl TokenLayout {
    /// Every position is a visual token.
    pub fn all_visual(n: usize) -> Self {
        TokenLayout {
            n_total: n,
            visual_indices: (0..n).collect(),
            text_indices: Vec::new(),
        }
    }

    /// Visual tokens occupy `visual_indices`; the rest are text.
    pub fn new(n_total: usize, visual_indices: Vec<usize>) -> Result<Self> {
        if let Some(w) = visual_indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "visual indices must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(&last) = visual_indices.last() {
            if last >= n_total {
                return Err(Error::InvalidConfig(format!(
                    "visual index {last} out of range for sequence length {n_total}"
                )));
            }
        }
        let mut is_visual = vec![false; n_total];
        visual_indices.iter().for_each(|&i| is_visual[i] = true);
        let text_indices = (0..n_total).filter(|&i| !is_visual[i]).collect();
        Ok(TokenLayout {
            n_total,
            visual_indices,
            text_indices,
        })
    }

    /// Parses a comma-separated list of indices and half-open ranges,
    /// e.g. `"0..4,6,9..12"`.
    pub fn parse_indices(spec: &str) -> Result<Vec<usize>> {
        let bad = || Error::InvalidConfig(format!("cannot parse index list `{spec}`"));
        let mut out = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once("..") {
                Some((lo, hi)) => {
                    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                    out.extend(lo..hi);
                }
                None => out.push(part.parse().map_err(|_| bad())?),
            }
        }
        Ok(out)
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn n_visual(&self) -> usize {
        self.visual_indices.len()
    }

    pub fn n_text(&self) -> usize {
        self.text_indices.len()
    }

    pub fn visual_indices(&self) -> &[usize] {
        &self.visual_indices
    }

    pub fn text_indices(&self) -> &[usize] {
        &self.text_indices
    }

    /// `true` at visual positions.
    pub fn visual_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_total];
        self.visual_indices.iter().for_each(|&i| mask[i] = true);
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_is_text() {
        let layout = TokenLayout::new(5, vec![0, 2, 3]).unwrap();
        assert_eq!(layout.text_indices(), &[1, 4]);
        assert_eq!(layout.n_visual() + layout.n_text(), layout.n_total());
        assert_eq!(layout.visual_mask(), vec![true, false, true, true, false]);
    }

    #[test]
    fn rejects_unsorted_or_out_of_range() {
        assert!(TokenLayout::new(4, vec![1, 1]).is_err());
        assert!(TokenLayout::new(4, vec![2, 1]).is_err());
        assert!(TokenLayout::new(4, vec![4]).is_err());
    }

    #[test]
    fn parses_ranges() {
        assert_eq!(
            TokenLayout::parse_indices("0..3, 5,7..9").unwrap(),
            vec![0, 1, 2, 5, 7, 8]
        );
        assert_eq!(TokenLayout::parse_indices("").unwrap(), Vec::<usize>::new());
        assert!(TokenLayout::parse_indices("a..b").is_err());
    }
}
