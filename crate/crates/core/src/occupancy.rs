//! Binary occupancy volumes for empty-space skipping.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::renderer::{SceneBounds, Vec3};

pub const DEFAULT_RESOLUTION: [usize; 3] = [24, 24, 48];
pub const DEFAULT_TAU1: f32 = 5.0;
/// Points per voxel edge checked during a build.
pub const SUBGRID: usize = 5;

pub const HEADER_LEN: usize = 16;
const MAGIC: &[u8; 3] = b"OCC";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyVolume {
    resolution: [usize; 3],
    bits: Vec<u8>,
    frame: usize,
    tau1: f32,
    bounds: SceneBounds,
}

impl OccupancyVolume {
    pub fn empty(resolution: [usize; 3], bounds: SceneBounds, frame: usize, tau1: f32) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0 || n > u16::MAX as usize) {
            return Err(Error::Config(format!("occupancy resolution {resolution:?} out of range")));
        }
        if frame > u16::MAX as usize {
            return Err(Error::Config(format!("frame {frame} does not fit the occupancy header")));
        }
        let n = resolution.iter().product::<usize>();
        Ok(OccupancyVolume { resolution, bits: vec![0; n.div_ceil(8)], frame, tau1, bounds })
    }

    /// Marks a voxel occupied when any of its `5^3` interior subgrid points,
    /// at offsets `(k + 0.5) / 5`, has density above `tau1`. `density` is
    /// called once per z-slab of voxels with world-space points.
    pub fn build_with<F>(resolution: [usize; 3], bounds: SceneBounds, frame: usize, tau1: f32, density: F) -> Result<Self>
    where
        F: Fn(&[Vec3]) -> Result<Vec<f64>> + Sync,
    {
        let mut vol = Self::empty(resolution, bounds, frame, tau1)?;
        let [nx, ny, nz] = resolution;
        let ext = bounds.extent();
        let per_voxel = SUBGRID * SUBGRID * SUBGRID;
        let slabs: Vec<Result<Vec<bool>>> = (0..nz)
            .into_par_iter()
            .map(|z| {
                let mut pts = Vec::with_capacity(nx * ny * per_voxel);
                for y in 0..ny {
                    for x in 0..nx {
                        for (a, b, c) in subgrid() {
                            pts.push([
                                bounds.min[0] + ext[0] * (x as f64 + a) / nx as f64,
                                bounds.min[1] + ext[1] * (y as f64 + b) / ny as f64,
                                bounds.min[2] + ext[2] * (z as f64 + c) / nz as f64,
                            ]);
                        }
                    }
                }
                let sigma = density(&pts)?;
                if sigma.len() != pts.len() {
                    return Err(Error::shape("occupancy build", format!("{} densities for {} points", sigma.len(), pts.len())));
                }
                Ok(sigma.chunks(per_voxel).map(|c| c.iter().any(|&s| s > tau1 as f64)).collect())
            })
            .collect();
        for (z, slab) in slabs.into_iter().enumerate() {
            for (i, occ) in slab?.into_iter().enumerate() {
                if occ {
                    vol.set(i % nx, i / nx, z, true);
                }
            }
        }
        Ok(vol)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn tau1(&self) -> f32 {
        self.tau1
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.bounds
    }

    fn bit_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let i = self.bit_index(x, y, z);
        self.bits[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.bit_index(x, y, z);
        if on {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn fill(&mut self, on: bool) {
        let n = self.resolution.iter().product::<usize>();
        for i in 0..n {
            let (x, r) = (i % self.resolution[0], i / self.resolution[0]);
            self.set(x, r % self.resolution[1], r / self.resolution[1], on);
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Voxel containing a world point, or `None` outside the bounds.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        if !self.bounds.contains(p) {
            return None;
        }
        let u = self.bounds.to_unit(p);
        Some([0, 1, 2].map(|a| ((u[a] * self.resolution[a] as f64).floor() as usize).min(self.resolution[a] - 1)))
    }

    pub fn query(&self, p: Vec3) -> bool {
        self.voxel_of(p).is_some_and(|[x, y, z]| self.get(x, y, z))
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// 16-byte little-endian header (magic, version, resolution, frame,
    /// threshold) followed by the bits, x fastest.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.bits.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for n in self.resolution {
            out.extend_from_slice(&(n as u16).to_le_bytes());
        }
        out.extend_from_slice(&(self.frame as u16).to_le_bytes());
        out.extend_from_slice(&self.tau1.to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn deserialize(bytes: &[u8], bounds: SceneBounds) -> Result<Self> {
        let bad = |d: String| Err(Error::format("occupancy", d));
        if bytes.len() < HEADER_LEN {
            return bad(format!("stream of {} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()));
        }
        if &bytes[..3] != MAGIC {
            return bad("bad magic".into());
        }
        if bytes[3] != VERSION {
            return bad(format!("unsupported version {}", bytes[3]));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let resolution = [u16_at(4), u16_at(6), u16_at(8)];
        let frame = u16_at(10);
        let tau1 = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let mut vol = Self::empty(resolution, bounds, frame, tau1)?;
        let want = HEADER_LEN + vol.bits.len();
        if bytes.len() != want {
            return bad(format!("expected {want} bytes for resolution {resolution:?}, got {}", bytes.len()));
        }
        vol.bits.copy_from_slice(&bytes[HEADER_LEN..]);
        Ok(vol)
    }
}

/// Subgrid offsets within a voxel, x fastest.
pub fn subgrid() -> impl Iterator<Item = (f64, f64, f64)> {
    let o = |k: usize| (k as f64 + 0.5) / SUBGRID as f64;
    (0..SUBGRID).flat_map(move |c| (0..SUBGRID).flat_map(move |b| (0..SUBGRID).map(move |a| (o(a), o(b), o(c)))))
}
