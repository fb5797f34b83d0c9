//! Dense 3D grayscale volumes, local environments and slab streaming.
//!
//! Volumes are stored as a raw little-endian voxel stream (`<name>.raw`) next
//! to a JSON sidecar (`<name>.json`) holding `{"dims":[dx,dy,dz],"dtype":...}`.
//! Raster order is x fastest, z slowest. Positions are 0-based `[x, y, z]`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A voxel position `[x, y, z]`, 0-based.
pub type Position = [usize; 3];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed sidecar {path}: {message}")]
    Metadata { path: PathBuf, message: String },
    #[error("unsupported dtype {0:?} (expected \"uint8\" or \"uint16\")")]
    UnsupportedDtype(String),
    #[error("invalid dimensions {0:?}: every axis needs at least one voxel")]
    InvalidDims([usize; 3]),
    #[error("size mismatch: dims {dims:?} as {dtype} need {expected} bytes, found {actual}")]
    SizeMismatch {
        dims: [usize; 3],
        dtype: Dtype,
        expected: u64,
        actual: u64,
    },
    #[error("environment size must be odd and at least 3, got {0}")]
    InvalidEnvSize(usize),
    #[error("position {position:?} is outside the volume {dims:?}")]
    OutOfBounds { position: Position, dims: [usize; 3] },
    #[error("slab thickness must be at least 1")]
    InvalidSlabThickness,
    #[error("value {value} exceeds the {dtype} range")]
    ValueOutOfRange { value: u32, dtype: Dtype },
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Voxel data type. Only unsigned integer volumes are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Uint8,
    Uint16,
}

impl Dtype {
    /// Maximal representable voxel value `W`.
    pub fn max_value(self) -> u32 {
        match self {
            Dtype::Uint8 => u8::MAX as u32,
            Dtype::Uint16 => u16::MAX as u32,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Dtype::Uint8 => 1,
            Dtype::Uint16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::Uint8 => "uint8",
            Dtype::Uint16 => "uint16",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "uint8" => Ok(Dtype::Uint8),
            "uint16" => Ok(Dtype::Uint16),
            other => Err(VolumeError::UnsupportedDtype(other.to_string())),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Dtype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Dtype {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Dtype::parse(&name).map_err(serde::de::Error::custom)
    }
}

/// Shape and data type of a volume. Serializes to the sidecar layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub dtype: Dtype,
}

/// Sidecar fields plus the derived voxel count and `W`, as reported by the
/// service and the `info` command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaReport {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub voxel_count: u64,
    pub max_value: u32,
}

impl VolumeMeta {
    pub fn new(dims: [usize; 3], dtype: Dtype) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidDims(dims));
        }
        Ok(Self { dims, dtype })
    }

    pub fn voxel_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn max_value(&self) -> u32 {
        self.dtype.max_value()
    }

    /// Number of voxels in one z-slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn slice_bytes(&self) -> usize {
        self.slice_len() * self.dtype.bytes_per_voxel()
    }

    pub fn byte_len(&self) -> u64 {
        self.voxel_count() * self.dtype.bytes_per_voxel() as u64
    }

    pub fn contains(&self, p: Position) -> bool {
        p.iter().zip(self.dims.iter()).all(|(&c, &d)| c < d)
    }

    pub fn check_position(&self, p: Position) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(VolumeError::OutOfBounds {
                position: p,
                dims: self.dims,
            })
        }
    }

    /// Linear raster index of `p` (x fastest).
    #[inline]
    pub fn index(&self, p: Position) -> usize {
        p[0] + self.dims[0] * (p[1] + self.dims[1] * p[2])
    }

    /// Whether a `k`³ window centered at `p` lies completely inside the volume.
    #[inline]
    pub fn window_fits(&self, p: Position, k: usize) -> bool {
        let h = k / 2;
        (0..3).all(|i| p[i] >= h && p[i] + h < self.dims[i])
    }

    pub fn report(&self) -> MetaReport {
        MetaReport {
            dims: self.dims,
            dtype: self.dtype,
            voxel_count: self.voxel_count(),
            max_value: self.max_value(),
        }
    }
}

/// Anything voxels can be read from by global position.
pub trait VoxelSource {
    fn meta(&self) -> &VolumeMeta;
    fn value(&self, p: Position) -> u16;
}

#[inline]
fn decode(bytes: &[u8], dtype: Dtype, index: usize) -> u16 {
    match dtype {
        Dtype::Uint8 => bytes[index] as u16,
        Dtype::Uint16 => u16::from_le_bytes([bytes[2 * index], bytes[2 * index + 1]]),
    }
}

enum Storage {
    Owned(Vec<u8>),
    Mapped(Mmap),
}

impl Storage {
    fn bytes(&self) -> &[u8] {
        match self {
            Storage::Owned(v) => v,
            Storage::Mapped(m) => m,
        }
    }
}

/// An immutable volume backed either by memory or a memory-mapped raw file.
pub struct Volume {
    meta: VolumeMeta,
    storage: Storage,
}

impl std::fmt::Debug for Volume {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let backing = match self.storage {
            Storage::Owned(_) => "memory",
            Storage::Mapped(_) => "mmap",
        };
        f.debug_struct("Volume")
            .field("meta", &self.meta)
            .field("backing", &backing)
            .finish()
    }
}

/// Splits a user-supplied volume path into the raw and sidecar paths.
/// Accepts `name`, `name.raw` or `name.json`.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("raw") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut raw = stem.clone().into_os_string();
    raw.push(".raw");
    let mut json = stem.into_os_string();
    json.push(".json");
    (PathBuf::from(raw), PathBuf::from(json))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads and validates a JSON sidecar.
pub fn read_meta(path: &Path) -> Result<VolumeMeta> {
    let (_, json_path) = volume_paths(path);
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let meta: VolumeMeta = serde_json::from_str(&text).map_err(|e| VolumeError::Metadata {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    VolumeMeta::new(meta.dims, meta.dtype)
}

pub fn write_meta(path: &Path, meta: &VolumeMeta) -> Result<()> {
    let (_, json_path) = volume_paths(path);
    let text = serde_json::to_string(meta).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(io_err(&json_path))
}

/// Opens a volume from its raw file and sidecar. The raw data is memory-mapped.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let meta = read_meta(path)?;
    let (raw_path, _) = volume_paths(path);
    let file = File::open(&raw_path).map_err(io_err(&raw_path))?;
    let actual = file.metadata().map_err(io_err(&raw_path))?.len();
    if actual != meta.byte_len() {
        return Err(VolumeError::SizeMismatch {
            dims: meta.dims,
            dtype: meta.dtype,
            expected: meta.byte_len(),
            actual,
        });
    }
    // SAFETY: the file is opened read-only and volumes are treated as
    // immutable for the lifetime of the mapping.
    let map = unsafe { Mmap::map(&file) }.map_err(io_err(&raw_path))?;
    Ok(Volume {
        meta,
        storage: Storage::Mapped(map),
    })
}

/// Writes raw bytes plus sidecar.
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let (raw_path, _) = volume_paths(path);
    let mut out = BufWriter::new(File::create(&raw_path).map_err(io_err(&raw_path))?);
    out.write_all(volume.bytes()).map_err(io_err(&raw_path))?;
    out.flush().map_err(io_err(&raw_path))?;
    write_meta(path, &volume.meta)
}

impl Volume {
    /// Wraps raw little-endian bytes.
    pub fn from_bytes(meta: VolumeMeta, bytes: Vec<u8>) -> Result<Self> {
        let meta = VolumeMeta::new(meta.dims, meta.dtype)?;
        if bytes.len() as u64 != meta.byte_len() {
            return Err(VolumeError::SizeMismatch {
                dims: meta.dims,
                dtype: meta.dtype,
                expected: meta.byte_len(),
                actual: bytes.len() as u64,
            });
        }
        Ok(Self {
            meta,
            storage: Storage::Owned(bytes),
        })
    }

    pub fn from_u8(dims: [usize; 3], values: Vec<u8>) -> Result<Self> {
        Self::from_bytes(VolumeMeta::new(dims, Dtype::Uint8)?, values)
    }

    pub fn from_u16(dims: [usize; 3], values: &[u16]) -> Result<Self> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_bytes(VolumeMeta::new(dims, Dtype::Uint16)?, bytes)
    }

    /// Builds a volume of the given dtype from values in raster order.
    pub fn from_values(dims: [usize; 3], dtype: Dtype, values: &[u16]) -> Result<Self> {
        match dtype {
            Dtype::Uint16 => Self::from_u16(dims, values),
            Dtype::Uint8 => {
                let bytes = values
                    .iter()
                    .map(|&v| {
                        u8::try_from(v).map_err(|_| VolumeError::ValueOutOfRange {
                            value: v as u32,
                            dtype,
                        })
                    })
                    .collect::<Result<Vec<u8>>>()?;
                Self::from_u8(dims, bytes)
            }
        }
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    pub fn bytes(&self) -> &[u8] {
        self.storage.bytes()
    }

    /// Voxel value at `p`. Panics if `p` is out of bounds.
    #[inline]
    pub fn get(&self, p: Position) -> u16 {
        decode(self.bytes(), self.meta.dtype, self.meta.index(p))
    }

    pub fn try_get(&self, p: Position) -> Result<u16> {
        self.meta.check_position(p)?;
        Ok(self.get(p))
    }

    /// All values in raster order.
    pub fn to_values(&self) -> Vec<u16> {
        let n = self.meta.voxel_count() as usize;
        (0..n)
            .map(|i| decode(self.bytes(), self.meta.dtype, i))
            .collect()
    }

    pub fn extract_environment(&self, center: Position, k: usize) -> Result<Environment> {
        extract_environment(self, center, k)
    }

    pub fn iter_slabs(&self, thickness: usize, k: usize) -> Result<Slabs<'_>> {
        iter_slabs(self, thickness, k)
    }

    /// Copies out the raw bytes of slices `z_range`.
    pub fn read_slices(&self, z_range: Range<usize>) -> Vec<u8> {
        let sb = self.meta.slice_bytes();
        self.bytes()[z_range.start * sb..z_range.end * sb].to_vec()
    }
}

impl VoxelSource for Volume {
    fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    #[inline]
    fn value(&self, p: Position) -> u16 {
        self.get(p)
    }
}

/// A `K`³ neighbourhood around a voxel, in raster order (x fastest).
///
/// Windows that would leave the volume are flagged incomplete and zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    size: usize,
    center: Position,
    values: Vec<u16>,
    complete: bool,
    max_value: u32,
}

pub fn check_env_size(k: usize) -> Result<()> {
    if k >= 3 && k % 2 == 1 {
        Ok(())
    } else {
        Err(VolumeError::InvalidEnvSize(k))
    }
}

impl Environment {
    /// Builds an environment from explicit values (raster order).
    pub fn from_values(size: usize, values: Vec<u16>, max_value: u32) -> Result<Self> {
        check_env_size(size)?;
        if values.len() != size * size * size {
            return Err(VolumeError::InvalidEnvSize(size));
        }
        let h = size / 2;
        Ok(Self {
            size,
            center: [h, h, h],
            values,
            complete: true,
            max_value,
        })
    }

    /// An incomplete, zero-filled environment for reuse as a scratch buffer.
    pub fn empty(size: usize, max_value: u32) -> Result<Self> {
        check_env_size(size)?;
        Ok(Self {
            size,
            center: [0; 3],
            values: vec![0; size * size * size],
            complete: false,
            max_value,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn center(&self) -> Position {
        self.center
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn max_value(&self) -> u32 {
        self.max_value
    }

    /// Value at window-local coordinates.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.values[x + self.size * (y + self.size * z)]
    }

    /// Refills this buffer with the window around `center` read from `src`.
    pub fn fill_from<S: VoxelSource + ?Sized>(&mut self, src: &S, center: Position) {
        let meta = src.meta();
        let k = self.size;
        self.center = center;
        self.max_value = meta.max_value();
        self.complete = meta.window_fits(center, k);
        if !self.complete {
            self.values.fill(0);
            return;
        }
        let h = k / 2;
        let mut i = 0;
        for z in center[2] - h..=center[2] + h {
            for y in center[1] - h..=center[1] + h {
                for x in center[0] - h..=center[0] + h {
                    self.values[i] = src.value([x, y, z]);
                    i += 1;
                }
            }
        }
    }
}

/// Extracts the `k`³ environment around `center`; incomplete windows are zero.
pub fn extract_environment<S: VoxelSource + ?Sized>(
    src: &S,
    center: Position,
    k: usize,
) -> Result<Environment> {
    check_env_size(k)?;
    src.meta().check_position(center)?;
    let mut env = Environment::empty(k, src.meta().max_value())?;
    env.fill_from(src, center);
    Ok(env)
}

/// Owned z-range of a slab plus the loaded range including halo slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlabSpec {
    pub owned: Range<usize>,
    pub loaded: Range<usize>,
}

impl SlabSpec {
    pub fn halo_below(&self) -> usize {
        self.owned.start - self.loaded.start
    }

    pub fn halo_above(&self) -> usize {
        self.loaded.end - self.owned.end
    }
}

/// Partitions `dz` slices into owned ranges of `thickness` slices, each with
/// up to `k/2` halo slices on either side.
pub fn plan_slabs(dz: usize, thickness: usize, k: usize) -> Result<Vec<SlabSpec>> {
    Ok(slab_specs(dz, thickness, k)?.collect())
}

/// Lazy form of [`plan_slabs`].
pub fn slab_specs(
    dz: usize,
    thickness: usize,
    k: usize,
) -> Result<impl Iterator<Item = SlabSpec> + Clone> {
    if thickness == 0 {
        return Err(VolumeError::InvalidSlabThickness);
    }
    check_env_size(k)?;
    let h = k / 2;
    Ok((0..dz).step_by(thickness).map(move |start| {
        let end = (start + thickness).min(dz);
        SlabSpec {
            owned: start..end,
            loaded: start.saturating_sub(h)..(end + h).min(dz),
        }
    }))
}

/// A block of z-slices with halo, holding its own copy of the raw bytes.
#[derive(Debug, Clone)]
pub struct Slab {
    meta: VolumeMeta,
    spec: SlabSpec,
    bytes: Vec<u8>,
}

impl Slab {
    pub fn load(volume: &Volume, spec: SlabSpec) -> Self {
        let bytes = volume.read_slices(spec.loaded.clone());
        Self {
            meta: volume.meta,
            spec,
            bytes,
        }
    }

    pub fn spec(&self) -> &SlabSpec {
        &self.spec
    }

    pub fn z_range(&self) -> Range<usize> {
        self.spec.owned.clone()
    }

    /// Bytes held by this slab (owned slices plus halo).
    pub fn resident_bytes(&self) -> usize {
        self.bytes.len()
    }
}

impl VoxelSource for Slab {
    fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    /// Reads by global position; `p[2]` must lie in the loaded range.
    #[inline]
    fn value(&self, p: Position) -> u16 {
        let local = [p[0], p[1], p[2] - self.spec.loaded.start];
        decode(&self.bytes, self.meta.dtype, self.meta.index(local))
    }
}

/// Iterator loading one slab at a time.
pub struct Slabs<'a> {
    volume: &'a Volume,
    specs: std::vec::IntoIter<SlabSpec>,
}

impl Iterator for Slabs<'_> {
    type Item = Slab;

    fn next(&mut self) -> Option<Slab> {
        self.specs.next().map(|spec| Slab::load(self.volume, spec))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.specs.size_hint()
    }
}

impl ExactSizeIterator for Slabs<'_> {}

pub fn iter_slabs(volume: &Volume, thickness: usize, k: usize) -> Result<Slabs<'_>> {
    let specs = plan_slabs(volume.dims()[2], thickness, k)?;
    Ok(Slabs {
        volume,
        specs: specs.into_iter(),
    })
}

/// Axis of a 2D slice through the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x" | "X" | "0" => Some(Axis::X),
            "y" | "Y" | "1" => Some(Axis::Y),
            "z" | "Z" | "2" => Some(Axis::Z),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// (width axis, height axis) of the displayed slice.
    fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

/// Geometry of a 2D slice: its size and the 3D position of each pixel.
#[derive(Debug, Clone, Copy)]
pub struct SliceGeometry {
    pub axis: Axis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
}

impl SliceGeometry {
    pub fn new(meta: &VolumeMeta, axis: Axis, index: usize) -> Result<Self> {
        let a = axis.index();
        if index >= meta.dims[a] {
            let mut position = [0; 3];
            position[a] = index;
            return Err(VolumeError::OutOfBounds {
                position,
                dims: meta.dims,
            });
        }
        let (u, v) = axis.plane();
        Ok(Self {
            axis,
            index,
            width: meta.dims[u],
            height: meta.dims[v],
        })
    }

    /// 3D position of pixel `(col, row)`.
    #[inline]
    pub fn position(&self, col: usize, row: usize) -> Position {
        let (u, v) = self.axis.plane();
        let mut p = [0; 3];
        p[self.axis.index()] = self.index;
        p[u] = col;
        p[v] = row;
        p
    }

    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        (0..self.height).flat_map(move |row| (0..self.width).map(move |col| self.position(col, row)))
    }
}

impl Volume {
    /// Values of one axis-aligned slice, row-major.
    pub fn slice_values(&self, axis: Axis, index: usize) -> Result<(SliceGeometry, Vec<u16>)> {
        let geom = SliceGeometry::new(&self.meta, axis, index)?;
        let values = geom.positions().map(|p| self.get(p)).collect();
        Ok((geom, values))
    }
}
