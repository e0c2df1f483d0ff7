use std::path::Path;

use crate::error::{Error, Result};

/// Fields of a `scene-city-location-segment-device.wav` clip name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipName {
    pub scene: String,
    pub city: String,
    pub location_id: u32,
    pub segment_id: u32,
    pub device: String,
}

pub fn parse_dcase_filename(name: &str) -> Result<ClipName> {
    let fail = || Error::FilenameParse { name: name.to_string() };
    let base = Path::new(name).file_name().and_then(|s| s.to_str()).ok_or_else(fail)?;
    let stem = base.strip_suffix(".wav").ok_or_else(fail)?;
    let parts: Vec<&str> = stem.split('-').collect();
    let [scene, city, loc, seg, device] = parts.as_slice() else {
        return Err(fail());
    };
    if [scene, city, device].iter().any(|s| s.is_empty()) {
        return Err(fail());
    }
    Ok(ClipName {
        scene: scene.to_string(),
        city: city.to_string(),
        location_id: loc.parse().map_err(|_| fail())?,
        segment_id: seg.parse().map_err(|_| fail())?,
        device: device.to_string(),
    })
}
