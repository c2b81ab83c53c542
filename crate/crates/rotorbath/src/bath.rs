//! Seeded `13C` bath configurations on the diamond lattice and their
//! partition into disjoint clusters.
//!
//! Coordinates are expressed in the crystal (NV) frame: the NV sits at the
//! origin and the `[111]` crystallographic direction, i.e. the NV symmetry
//! axis, is `+z`. Reproducibility contract: site occupation is drawn with a
//! `ChaCha8` stream cipher seeded by the 64-bit configuration seed, one draw
//! per candidate site in lattice order. A draw `u` is formed from the top 53
//! bits of the next 64-bit output (`u = (next_u64() >> 11) * 2^-53`) and the
//! site is occupied iff `u < abundance`. Identical `(seed, parameters)`
//! therefore regenerate identical configurations bit for bit, on every
//! platform.

use std::io::{BufRead, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::{Error, Result, Vector3};

/// A carbon site of the diamond lattice, in nm, NV frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSite {
    pub position: Vector3,
}

/// Sampling parameters of a bath configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathParams {
    /// Occupation probability per lattice site (1.1% natural abundance).
    pub abundance: f64,
    /// Generation cutoff radius around the NV, nm.
    pub radius: f64,
    /// NV exclusion radius, nm. Sites closer than this are discarded before
    /// sampling; the point-dipole hyperfine model is not valid for them.
    pub min_distance: f64,
}

impl Default for BathParams {
    /// Defaults target an expected count of about 125 spins at natural
    /// abundance, with the first two coordination shells excluded.
    fn default() -> Self {
        Self {
            abundance: 0.011,
            radius: 2.48,
            min_distance: 0.25,
        }
    }
}

/// A sampled set of occupied `13C` positions plus everything needed to
/// regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct BathConfiguration {
    pub seed: u64,
    pub sites: Vec<Vector3>,
    pub abundance: f64,
    pub radius: f64,
    pub min_distance: f64,
}

/// Disjoint grouping of bath-site indices, each group of size `<= g_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    pub groups: Vec<Vec<usize>>,
    pub g_max: usize,
}

/// All diamond-lattice carbon sites within `radius` nm of the NV origin,
/// excluding the origin itself.
///
/// Sites are enumerated on the conventional cubic cell (edge `4 a0 / sqrt 3`)
/// in integer quarter-cell coordinates, ordered lexicographically by those
/// integer coordinates, and finally rotated so that `[111]` becomes `+z`.
/// A radius below the nearest-neighbour distance yields an empty list.
pub fn generate_lattice(constants: &PhysicalConstants, radius: f64) -> Vec<LatticeSite> {
    if radius <= 0.0 {
        return Vec::new();
    }
    let quarter = constants.a0 * 4.0 / 3.0f64.sqrt() / 4.0; // a_cube / 4, nm
    let cells = (radius / (4.0 * quarter)).ceil() as i64 + 1;
    const OFFSETS: [[i64; 3]; 8] = [
        [0, 0, 0],
        [0, 2, 2],
        [1, 1, 1],
        [1, 3, 3],
        [2, 0, 2],
        [2, 2, 0],
        [3, 1, 3],
        [3, 3, 1],
    ];
    let mut coords: Vec<[i64; 3]> = Vec::new();
    let r2 = (radius / quarter).powi(2);
    for i in -cells..=cells {
        for j in -cells..=cells {
            for k in -cells..=cells {
                for off in OFFSETS {
                    let p = [4 * i + off[0], 4 * j + off[1], 4 * k + off[2]];
                    if p == [0, 0, 0] {
                        continue;
                    }
                    let n2 = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) as f64;
                    if n2 <= r2 {
                        coords.push(p);
                    }
                }
            }
        }
    }
    coords.sort_unstable();
    coords
        .into_iter()
        .map(|p| LatticeSite {
            position: to_nv_frame(p, quarter),
        })
        .collect()
}

/// Map integer quarter-cell coordinates to nm in the NV frame
/// (x' = [1,-1,0], y' = [1,1,-2], z' = [1,1,1], orthonormalized).
fn to_nv_frame(p: [i64; 3], quarter: f64) -> Vector3 {
    let v = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) * quarter;
    Vector3::new(
        (v.x - v.y) / 2.0f64.sqrt(),
        (v.x + v.y - 2.0 * v.z) / 6.0f64.sqrt(),
        (v.x + v.y + v.z) / 3.0f64.sqrt(),
    )
}

/// Occupy each candidate site independently with probability `abundance`,
/// using the seeded draw sequence documented at module level.
pub fn sample_bath(sites: &[LatticeSite], abundance: f64, seed: u64) -> Vec<Vector3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sites
        .iter()
        .filter(|_| {
            let u = (rng.next_u64() >> 11) as f64 * 2.0f64.powi(-53);
            u < abundance
        })
        .map(|s| s.position)
        .collect()
}

impl BathConfiguration {
    /// Generate the configuration for `(params, seed)`: lattice sites within
    /// the radius, minimum-distance filter, then seeded occupation sampling.
    pub fn generate(constants: &PhysicalConstants, params: &BathParams, seed: u64) -> Self {
        let lattice = generate_lattice(constants, params.radius);
        let candidates: Vec<LatticeSite> = lattice
            .into_iter()
            .filter(|s| s.position.norm() >= params.min_distance)
            .collect();
        let sites = sample_bath(&candidates, params.abundance, seed);
        Self {
            seed,
            sites,
            abundance: params.abundance,
            radius: params.radius,
            min_distance: params.min_distance,
        }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Serialize to the plain-text archive format (`# rotorbath bath v1`):
    /// a comment line, `key = value` parameter lines, then one `x y z` line
    /// per site in nm. Floats are written in shortest round-trip form, so a
    /// read-back reproduces the positions bit for bit.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# rotorbath bath v1")?;
        writeln!(w, "seed = {}", self.seed)?;
        writeln!(w, "abundance = {:e}", self.abundance)?;
        writeln!(w, "radius_nm = {:e}", self.radius)?;
        writeln!(w, "min_distance_nm = {:e}", self.min_distance)?;
        writeln!(w, "sites = {}", self.sites.len())?;
        for s in &self.sites {
            writeln!(w, "{:e} {:e} {:e}", s.x, s.y, s.z)?;
        }
        Ok(())
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut buf = Vec::new();
        self.write_text(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Parse the plain-text archive format written by [`Self::write_text`].
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut seed = None;
        let mut abundance = None;
        let mut radius = None;
        let mut min_distance = None;
        let mut expected_sites = None;
        let mut sites = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let malformed = |message: &str| Error::BathFile {
                line: line_no,
                message: message.to_string(),
            };
            if let Some((key, value)) = trimmed.split_once('=') {
                let value = value.trim();
                match key.trim() {
                    "seed" => seed = Some(value.parse().map_err(|_| malformed("bad seed"))?),
                    "abundance" => {
                        abundance = Some(value.parse().map_err(|_| malformed("bad abundance"))?)
                    }
                    "radius_nm" => {
                        radius = Some(value.parse().map_err(|_| malformed("bad radius"))?)
                    }
                    "min_distance_nm" => {
                        min_distance =
                            Some(value.parse().map_err(|_| malformed("bad min_distance"))?)
                    }
                    "sites" => {
                        expected_sites =
                            Some(value.parse::<usize>().map_err(|_| malformed("bad count"))?)
                    }
                    other => {
                        return Err(malformed(&format!("unknown key {other:?}")));
                    }
                }
            } else {
                let parts: Vec<f64> = trimmed
                    .split_whitespace()
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| malformed("bad coordinate"))?;
                if parts.len() != 3 {
                    return Err(malformed("expected three coordinates"));
                }
                sites.push(Vector3::new(parts[0], parts[1], parts[2]));
            }
        }
        let missing = |message: &str| Error::BathFile {
            line: 0,
            message: message.to_string(),
        };
        if let Some(n) = expected_sites {
            if n != sites.len() {
                return Err(missing(&format!(
                    "declared {n} sites but found {}",
                    sites.len()
                )));
            }
        }
        Ok(Self {
            seed: seed.ok_or_else(|| missing("missing seed"))?,
            sites,
            abundance: abundance.ok_or_else(|| missing("missing abundance"))?,
            radius: radius.ok_or_else(|| missing("missing radius_nm"))?,
            min_distance: min_distance.ok_or_else(|| missing("missing min_distance_nm"))?,
        })
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_text(std::io::BufReader::new(file))
    }
}

/// Secular dipolar pair weight `|(1 - 3 cos^2 theta_ij)| / r_ij^3` with the
/// crystal `z` axis as quantization axis.
pub fn pair_coupling_weight(r_i: Vector3, r_j: Vector3) -> f64 {
    let d = r_j - r_i;
    let r = d.norm();
    let cos = d.z / r;
    ((1.0 - 3.0 * cos * cos) / r.powi(3)).abs()
}

/// Greedy disjoint clustering: pairs are visited in descending order of
/// [`pair_coupling_weight`] (ties broken by site index order) and two groups
/// merge whenever the combined size stays within `g_max`.
pub fn partition_clusters(bath: &BathConfiguration, g_max: usize) -> ClusterPartition {
    assert!(g_max >= 1, "g_max must be at least 1");
    let n = bath.sites.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n.saturating_sub(1) * n / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((pair_coupling_weight(bath.sites[i], bath.sites[j]), i, j));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (_, i, j) in pairs {
        let ri = find(&mut parent, i);
        let rj = find(&mut parent, j);
        if ri != rj && size[ri] + size[rj] <= g_max {
            // Lower root index wins so the result is order-independent.
            let (keep, drop) = if ri < rj { (ri, rj) } else { (rj, ri) };
            parent[drop] = keep;
            size[keep] += size[drop];
        }
    }

    let mut groups_by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        groups_by_root[r].push(i);
    }
    let groups: Vec<Vec<usize>> = groups_by_root
        .into_iter()
        .filter(|g| !g.is_empty())
        .collect();
    ClusterPartition { groups, g_max }
}

impl ClusterPartition {
    /// Positions of one group, resolved against the bath.
    pub fn group_sites(&self, bath: &BathConfiguration, group: usize) -> Vec<Vector3> {
        self.groups[group].iter().map(|&i| bath.sites[i]).collect()
    }
}
