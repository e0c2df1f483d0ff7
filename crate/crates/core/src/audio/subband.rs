use serde::{Deserialize, Serialize};

use super::mel::FeatureMap;
use crate::error::{Error, Result};

/// Overlapping mel-axis bands of equal width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubBandSplit {
    pub sub_size: usize,
    pub overlap: usize,
    pub bands: Vec<(usize, usize)>,
}

impl SubBandSplit {
    pub fn new(mel_bins: usize, sub_size: usize, overlap: usize) -> Result<Self> {
        if sub_size == 0 || overlap >= sub_size || sub_size > mel_bins {
            return Err(Error::config(format!(
                "sub_size={sub_size}, overlap={overlap} invalid for {mel_bins} mel bins (need 0 <= overlap < sub_size <= mel_bins); {}",
                valid_pairs_hint(mel_bins)
            )));
        }
        let step = sub_size - overlap;
        if (mel_bins - sub_size) % step != 0 {
            return Err(Error::config(format!(
                "(mel_bins - sub_size) = {} is not divisible by (sub_size - overlap) = {step}; {}",
                mel_bins - sub_size,
                valid_pairs_hint(mel_bins)
            )));
        }
        let count = (mel_bins - sub_size) / step + 1;
        let bands = (0..count).map(|b| (b * step, b * step + sub_size)).collect();
        Ok(SubBandSplit { sub_size, overlap, bands })
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

fn valid_pairs_hint(mel_bins: usize) -> String {
    let mut pairs = Vec::new();
    for sub in (2..=mel_bins).rev() {
        for ov in [sub / 2, 0] {
            let step = sub - ov;
            if (mel_bins - sub) % step == 0 && pairs.len() < 6 && !pairs.contains(&(sub, ov)) {
                pairs.push((sub, ov));
            }
        }
    }
    let list: Vec<String> = pairs.iter().map(|(s, o)| format!("({s},{o})")).collect();
    format!("valid (sub_size, overlap) pairs for {mel_bins} bins include {}", list.join(", "))
}

/// Slice a feature map into its mel bands; channels and frames are kept.
pub fn split_subspectrograms(f: &FeatureMap, sub_size: usize, overlap: usize) -> Result<Vec<FeatureMap>> {
    let split = SubBandSplit::new(f.mel_bins(), sub_size, overlap)?;
    split
        .bands
        .iter()
        .map(|&(start, end)| FeatureMap::new(f.values.narrow(1, start, end - start)?, f.frame_params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel::FrameParams;
    use crate::tensor::Tensor;

    #[test]
    fn forty_bins_three_bands() {
        let s = SubBandSplit::new(40, 20, 10).unwrap();
        assert_eq!(s.bands, vec![(0, 20), (10, 30), (20, 40)]);
    }

    #[test]
    fn two_hundred_bins_nineteen_bands() {
        let s = SubBandSplit::new(200, 20, 10).unwrap();
        assert_eq!(s.len(), 19);
        assert_eq!(*s.bands.last().unwrap(), (180, 200));
    }

    #[test]
    fn identity_split() {
        let values = Tensor::new(vec![2, 8, 3], (0..48).map(|v| v as f32).collect()).unwrap();
        let f = FeatureMap::new(values, FrameParams::default()).unwrap();
        let bands = split_subspectrograms(&f, 8, 0).unwrap();
        assert_eq!(bands.len(), 1);
        assert_eq!(bands[0], f);
    }

    #[test]
    fn non_divisible_lists_valid_pairs() {
        let err = SubBandSplit::new(40, 18, 10).unwrap_err();
        let msg = err.to_string();
        assert!(err.is_validation());
        assert!(msg.contains("(20,10)"), "{msg}");
    }
}
