//! Operator cache archive and the binary particle file.
//!
//! A cache archive is a text manifest followed by a binary payload:
//!
//! ```text
//! lapfmm-operator-cache
//! version 1
//! scalar f64
//! fingerprint <sha-256 hex>
//! p 6
//! p_check 6
//! alpha_inner <f64 bits, hex>
//! alpha_outer <f64 bits, hex>
//! svd_cutoff <f64 bits, hex>
//! origin <hex> <hex> <hex>
//! side <hex>
//! matrix <name> <rows> <cols> <offset>
//! ...
//! end
//! ```
//!
//! The payload starts at the first 64-byte boundary after the manifest.
//! Each matrix is stored row-major as little-endian `f64`, at its `offset`
//! from the payload start; offsets are multiples of 64.
//!
//! A particle file is a little-endian `u64` count `N`, then `N x 3` `f64`
//! positions, then `N` `f64` charges.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{FmmError, Result};
use crate::linalg::Matrix;
use crate::operators::{CacheParams, OperatorCache};
use crate::scalar::Scalar;
use crate::tree::ParticleSet;

pub const CACHE_VERSION: u32 = 1;
const MAGIC: &str = "lapfmm-operator-cache";
const ALIGN: usize = 64;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FmmError + '_ {
    move |source| FmmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, detail: impl Into<String>) -> FmmError {
    FmmError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn m2l_name(tv: [i32; 3]) -> String {
    format!("m2l.{}.{}.{}", tv[0], tv[1], tv[2])
}

/// Matrices in archive order.
fn named_matrices<T: Scalar>(cache: &OperatorCache<T>) -> Vec<(String, &Matrix<T>)> {
    let mut out = vec![
        ("uc2e_inv".to_string(), &cache.uc2e_inv),
        ("dc2e_inv".to_string(), &cache.dc2e_inv),
    ];
    out.extend(cache.m2m.iter().enumerate().map(|(i, m)| (format!("m2m.{i}"), m)));
    out.extend(cache.l2l.iter().enumerate().map(|(i, m)| (format!("l2l.{i}"), m)));
    out.extend(cache.m2l_entries().map(|(tv, m)| (m2l_name(tv), m)));
    out
}

pub fn save_cache<T: Scalar>(cache: &OperatorCache<T>, path: &Path) -> Result<()> {
    let params = &cache.params;
    let mut manifest = format!(
        "{MAGIC}\nversion {CACHE_VERSION}\nscalar {}\nfingerprint {}\np {}\np_check {}\nalpha_inner {}\nalpha_outer {}\nsvd_cutoff {}\norigin {} {} {}\nside {}\n",
        T::NAME,
        cache.fingerprint,
        params.p,
        params.p_check,
        hex(params.alpha_inner),
        hex(params.alpha_outer),
        hex(params.svd_cutoff),
        hex(params.origin[0]),
        hex(params.origin[1]),
        hex(params.origin[2]),
        hex(params.side),
    );
    let matrices = named_matrices(cache);
    let mut offset = 0;
    for (name, m) in &matrices {
        manifest.push_str(&format!("matrix {name} {} {} {offset}\n", m.rows(), m.cols()));
        offset = align(offset + m.rows() * m.cols() * 8);
    }
    manifest.push_str("end\n");

    let header_len = align(manifest.len());
    let mut bytes = Vec::with_capacity(header_len + offset);
    bytes.extend_from_slice(manifest.as_bytes());
    bytes.resize(header_len, 0);
    for (_, m) in &matrices {
        for v in m.data() {
            bytes.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
        bytes.resize(header_len + align(bytes.len() - header_len), 0);
    }

    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(&bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Manifest {
    scalar: String,
    fingerprint: String,
    params: CacheParams,
    /// name, rows, cols, offset
    catalog: Vec<(String, usize, usize, usize)>,
    header_len: usize,
}

fn parse_manifest(bytes: &[u8], path: &Path) -> Result<Manifest> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| corrupt(path, "manifest is not terminated"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt(path, "manifest is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt(path, "not an operator cache"));
    }

    let mut fields = std::collections::HashMap::new();
    let mut catalog = Vec::new();
    for line in lines {
        let (key, value) = line.split_once(' ').ok_or_else(|| corrupt(path, format!("bad line `{line}`")))?;
        if key == "matrix" {
            let parts: Vec<&str> = value.split(' ').collect();
            let parse = |s: &str| s.parse::<usize>().map_err(|_| corrupt(path, format!("bad matrix entry `{line}`")));
            if parts.len() != 4 {
                return Err(corrupt(path, format!("bad matrix entry `{line}`")));
            }
            catalog.push((parts[0].to_string(), parse(parts[1])?, parse(parts[2])?, parse(parts[3])?));
        } else {
            fields.insert(key, value);
        }
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| corrupt(path, format!("missing `{k}`")));

    let version = field("version")?;
    if version.parse::<u32>().ok() != Some(CACHE_VERSION) {
        return Err(FmmError::VersionMismatch {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: CACHE_VERSION,
        });
    }
    let float = |s: &str| {
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|_| corrupt(path, format!("bad number `{s}`")))
    };
    let int = |s: &str| s.parse::<usize>().map_err(|_| corrupt(path, format!("bad integer `{s}`")));
    let origin: Vec<f64> = field("origin")?.split(' ').map(float).collect::<Result<_>>()?;
    if origin.len() != 3 {
        return Err(corrupt(path, "origin needs three coordinates"));
    }
    let params = CacheParams {
        p: int(field("p")?)?,
        p_check: int(field("p_check")?)?,
        alpha_inner: float(field("alpha_inner")?)?,
        alpha_outer: float(field("alpha_outer")?)?,
        svd_cutoff: float(field("svd_cutoff")?)?,
        origin: [origin[0], origin[1], origin[2]],
        side: float(field("side")?)?,
    };
    Ok(Manifest {
        scalar: field("scalar")?.to_string(),
        fingerprint: field("fingerprint")?.to_string(),
        params,
        catalog,
        header_len: align(end + 5),
    })
}

/// Load a cache, refusing foreign versions and fingerprints other than
/// `expected_fingerprint` before reading any matrix.
pub fn load_cache<T: Scalar>(path: &Path, expected_fingerprint: &str) -> Result<OperatorCache<T>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let manifest = parse_manifest(&bytes, path)?;
    if manifest.fingerprint != expected_fingerprint {
        return Err(FmmError::FingerprintMismatch {
            path: path.to_path_buf(),
            found: manifest.fingerprint,
            expected: expected_fingerprint.to_string(),
        });
    }
    if manifest.scalar != T::NAME {
        return Err(corrupt(path, format!("cache holds {} data, expected {}", manifest.scalar, T::NAME)));
    }
    if manifest.params.fingerprint::<T>() != manifest.fingerprint {
        return Err(corrupt(path, "parameters do not hash to the stored fingerprint"));
    }

    let payload = &bytes[manifest.header_len.min(bytes.len())..];
    let mut uc2e = None;
    let mut dc2e = None;
    let mut m2m = vec![None; 8];
    let mut l2l = vec![None; 8];
    let mut m2l = Vec::new();
    for (name, rows, cols, offset) in &manifest.catalog {
        let len = rows * cols * 8;
        let segment = payload
            .get(*offset..offset + len)
            .ok_or_else(|| corrupt(path, format!("payload truncated in `{name}`")))?;
        let data = segment
            .chunks_exact(8)
            .map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let m = Matrix::from_vec(*rows, *cols, data)?;
        let bad_name = || corrupt(path, format!("unknown matrix `{name}`"));
        let octant = |s: &str| s.parse::<usize>().ok().filter(|&o| o < 8).ok_or_else(bad_name);
        match name.split_once('.') {
            None if name == "uc2e_inv" => uc2e = Some(m),
            None if name == "dc2e_inv" => dc2e = Some(m),
            Some(("m2m", o)) => m2m[octant(o)?] = Some(m),
            Some(("l2l", o)) => l2l[octant(o)?] = Some(m),
            Some(("m2l", tv)) => {
                let c: Vec<i32> = tv.split('.').map(|s| s.parse().map_err(|_| bad_name())).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad_name());
                }
                m2l.push(([c[0], c[1], c[2]], m));
            }
            _ => return Err(bad_name()),
        }
    }
    let missing = |what: &str| corrupt(path, format!("missing matrix `{what}`"));
    let m2m = m2m.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| missing("m2m"))?;
    let l2l = l2l.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| missing("l2l"))?;
    OperatorCache::from_parts(
        manifest.params,
        uc2e.ok_or_else(|| missing("uc2e_inv"))?,
        dc2e.ok_or_else(|| missing("dc2e_inv"))?,
        m2m,
        l2l,
        m2l,
    )
}

pub fn write_particles(particles: &ParticleSet<f64>, path: &Path) -> Result<()> {
    let n = particles.len();
    let mut bytes = Vec::with_capacity(8 + 32 * n);
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    for p in &particles.positions {
        for c in p {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    for q in &particles.charges {
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_particles(path: &Path) -> Result<ParticleSet<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| corrupt(path, "missing particle count"))?;
    let n = u64::from_le_bytes(header);
    let expected = n.checked_mul(32).and_then(|b| b.checked_add(8));
    if expected != Some(bytes.len() as u64) {
        return Err(corrupt(
            path,
            format!("{n} particles need {} bytes, file has {}", 8 + 32 * n as u128, bytes.len()),
        ));
    }
    let n = n as usize;
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let positions = values[..3 * n].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let charges = values[3 * n..].to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt(path, "non-finite particle data"));
    }
    ParticleSet::new(positions, charges)
}
