//! Binary container for capability maps.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            4 bytes  "CAPM"
//! version          u32      1
//! origin           3 x f64
//! resolution       f64
//! dims             3 x u32
//! w_threshold      f64
//! samples_per_pose u32
//! seed             u64
//! lattice_len      u32, then lattice_len x (x f64, y f64, theta f64)
//! voxel_count      u32, then voxel_count x record:
//!                    flags u8 (bit 0 = reachable), best_w f64, hint u32 (0xFFFFFFFF = none)
//! reach lists      (voxel_count + 1) x u32 offsets, entry_count u32, entry_count x u32 pose index
//! template         shoulder 3 x f64, sample_count u32, sample_count x (x, y, z, w f64)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::capability::{CapabilityEntry, CapabilityMap, ReachTemplate};
use crate::geometry::{Pose2, Vec3};
use crate::world::VoxelGrid;

pub const MAGIC: &[u8; 4] = b"CAPM";
pub const VERSION: u32 = 1;
const NO_HINT: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a capability map (bad magic)")]
    BadMagic,
    #[error("unsupported capability map version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt capability map: {0}")]
    Corrupt(String),
}

fn write_vec3<W: Write>(w: &mut W, v: &Vec3) -> io::Result<()> {
    for i in 0..3 {
        w.write_f64::<LE>(v[i])?;
    }
    Ok(())
}

fn read_vec3<R: Read>(r: &mut R) -> io::Result<Vec3> {
    Ok(Vec3::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?, r.read_f64::<LE>()?))
}

fn len_u32(n: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Corrupt(format!("{what} count {n} exceeds u32")))
}

impl CapabilityMap {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_vec3(w, &self.geometry.origin())?;
        w.write_f64::<LE>(self.geometry.resolution())?;
        for d in self.geometry.dims() {
            w.write_u32::<LE>(len_u32(d, "dimension")?)?;
        }
        w.write_f64::<LE>(self.w_threshold)?;
        w.write_u32::<LE>(self.samples_per_pose)?;
        w.write_u64::<LE>(self.seed)?;

        w.write_u32::<LE>(len_u32(self.lattice.len(), "lattice")?)?;
        for p in &self.lattice {
            w.write_f64::<LE>(p.x)?;
            w.write_f64::<LE>(p.y)?;
            w.write_f64::<LE>(p.theta)?;
        }

        w.write_u32::<LE>(len_u32(self.entries.len(), "voxel")?)?;
        for e in &self.entries {
            w.write_u8(e.reachable as u8)?;
            w.write_f64::<LE>(e.best_w)?;
            w.write_u32::<LE>(e.hint.unwrap_or(NO_HINT))?;
        }

        for &o in &self.reach_offsets {
            w.write_u32::<LE>(o)?;
        }
        w.write_u32::<LE>(len_u32(self.reach_poses.len(), "reach entry")?)?;
        for &p in &self.reach_poses {
            w.write_u32::<LE>(p)?;
        }

        write_vec3(w, &self.template.shoulder)?;
        w.write_u32::<LE>(len_u32(self.template.samples.len(), "template sample")?)?;
        for (p, wv) in &self.template.samples {
            write_vec3(w, p)?;
            w.write_f64::<LE>(*wv)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let origin = read_vec3(r)?;
        let resolution = r.read_f64::<LE>()?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LE>()? as usize;
        }
        let geometry = VoxelGrid::new(origin, resolution, dims).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        let w_threshold = r.read_f64::<LE>()?;
        let samples_per_pose = r.read_u32::<LE>()?;
        let seed = r.read_u64::<LE>()?;

        let n_lattice = r.read_u32::<LE>()? as usize;
        let mut lattice = Vec::with_capacity(n_lattice.min(1 << 20));
        for _ in 0..n_lattice {
            lattice.push(Pose2::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?, r.read_f64::<LE>()?));
        }

        let n_vox = r.read_u32::<LE>()? as usize;
        if n_vox != geometry.len() {
            return Err(FormatError::Corrupt(format!(
                "{n_vox} voxel records for a grid of {} voxels",
                geometry.len()
            )));
        }
        let mut entries = Vec::with_capacity(n_vox);
        for _ in 0..n_vox {
            let flags = r.read_u8()?;
            if flags > 1 {
                return Err(FormatError::Corrupt(format!("unknown voxel flags {flags:#x}")));
            }
            let best_w = r.read_f64::<LE>()?;
            let hint = match r.read_u32::<LE>()? {
                NO_HINT => None,
                h if (h as usize) < n_lattice => Some(h),
                h => return Err(FormatError::Corrupt(format!("hint {h} outside lattice"))),
            };
            entries.push(CapabilityEntry { reachable: flags & 1 == 1, best_w, hint });
        }

        let mut reach_offsets = Vec::with_capacity(n_vox + 1);
        for _ in 0..=n_vox {
            reach_offsets.push(r.read_u32::<LE>()?);
        }
        let n_reach = r.read_u32::<LE>()? as usize;
        if reach_offsets[0] != 0
            || reach_offsets.windows(2).any(|w| w[0] > w[1])
            || reach_offsets[n_vox] as usize != n_reach
        {
            return Err(FormatError::Corrupt("reach list offsets are inconsistent".into()));
        }
        let mut reach_poses = Vec::with_capacity(n_reach.min(1 << 24));
        for _ in 0..n_reach {
            let p = r.read_u32::<LE>()?;
            if p as usize >= n_lattice {
                return Err(FormatError::Corrupt(format!("pose index {p} outside lattice")));
            }
            reach_poses.push(p);
        }

        let shoulder = read_vec3(r)?;
        let n_samples = r.read_u32::<LE>()? as usize;
        let mut samples = Vec::with_capacity(n_samples.min(1 << 20));
        for _ in 0..n_samples {
            let p = read_vec3(r)?;
            samples.push((p, r.read_f64::<LE>()?));
        }

        Ok(CapabilityMap {
            geometry,
            w_threshold,
            samples_per_pose,
            seed,
            lattice,
            entries,
            reach_offsets,
            reach_poses,
            template: ReachTemplate { shoulder, samples },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, FormatError> {
        let map = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(FormatError::Corrupt(format!("{} trailing bytes", bytes.len())));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
