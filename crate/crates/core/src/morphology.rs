//! Binary voxel morphology used to split a cartilage mask into the voxels on
//! the bone interface and the voxels on the articular side.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Face6,
    Edge18,
    Vertex26,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    let nz = (di != 0) as u8 + (dj != 0) as u8 + (dk != 0) as u8;
                    let keep = match self {
                        Connectivity::Face6 => nz == 1,
                        Connectivity::Edge18 => nz == 1 || nz == 2,
                        Connectivity::Vertex26 => nz >= 1,
                    };
                    if keep {
                        out.push([di, dj, dk]);
                    }
                }
            }
        }
        out
    }
}

/// Voxels of `m` with at least one neighbour outside `m`; the grid border
/// counts as outside.
pub fn boundary(m: &BinaryMask, c: Connectivity) -> BinaryMask {
    let g = &m.geometry;
    let offsets = c.offsets();
    let data = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            if !m.data[idx] {
                return false;
            }
            let p = g.coords(idx).map(|v| v as i64);
            offsets.iter().any(|o| {
                m.get_signed([p[0] + o[0], p[1] + o[1], p[2] + o[2]]) != Some(true)
            })
        })
        .collect();
    Volume {
        geometry: g.clone(),
        data,
    }
}

pub fn invert(m: &BinaryMask) -> BinaryMask {
    m.map(|b| !b)
}

/// Gap-filling parameters for [`fill_gap`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GapFill {
    /// Widest background run between bone and cartilage that is bridged.
    pub max_gap: usize,
    /// Region-growing rounds from the bone.
    pub rounds: usize,
}

impl Default for GapFill {
    fn default() -> Self {
        GapFill {
            max_gap: 2,
            rounds: 3,
        }
    }
}

/// Grow the bone into the thin background gap separating it from the
/// cartilage and return `cart ∪ bone ∪ grown`.
///
/// A background voxel is a gap voxel when, along some grid axis, it sits on a
/// run of at most `max_gap` background voxels with bone on one end and
/// cartilage on the other. Growth proceeds from the bone through face-adjacent
/// gap voxels for at most `rounds` iterations.
pub fn fill_gap(cart: &BinaryMask, bone: &BinaryMask, params: GapFill) -> Result<BinaryMask> {
    cart.geometry
        .ensure_same_grid(&bone.geometry, "cartilage and bone")?;
    if cart.intersects(bone) {
        return Err(Error::invalid("cartilage and bone masks overlap"));
    }
    let g = &cart.geometry;
    let occupied = |p: [i64; 3]| -> Option<(bool, bool)> {
        g.contains(p).then(|| {
            let idx = g.index(p[0] as usize, p[1] as usize, p[2] as usize);
            (cart.data[idx], bone.data[idx])
        })
    };
    let max_gap = params.max_gap as i64;
    let gap: Vec<bool> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            if cart.data[idx] || bone.data[idx] {
                return false;
            }
            let p = g.coords(idx).map(|v| v as i64);
            for axis in 0..3 {
                for dir in [-1i64, 1] {
                    // Distance to the first tissue voxel in each direction.
                    let first_hit = |sign: i64| -> Option<(i64, bool)> {
                        for step in 1..=max_gap {
                            let mut q = p;
                            q[axis] += sign * step;
                            match occupied(q) {
                                None => return None,
                                Some((true, _)) => return Some((step, true)),
                                Some((_, true)) => return Some((step, false)),
                                _ => {}
                            }
                        }
                        None
                    };
                    if let (Some((dc, true)), Some((db, false))) = (first_hit(dir), first_hit(-dir)) {
                        if dc + db - 1 <= max_gap {
                            return true;
                        }
                    }
                }
            }
            false
        })
        .collect();

    let mut grown = bone.data.clone();
    let offsets = Connectivity::Face6.offsets();
    for _ in 0..params.rounds {
        let add: Vec<usize> = (0..g.len())
            .into_par_iter()
            .filter(|&idx| {
                gap[idx] && !grown[idx] && {
                    let p = g.coords(idx).map(|v| v as i64);
                    offsets.iter().any(|o| {
                        let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                        g.contains(q)
                            && grown[g.index(q[0] as usize, q[1] as usize, q[2] as usize)]
                    })
                }
            })
            .collect();
        if add.is_empty() {
            break;
        }
        for idx in add {
            grown[idx] = true;
        }
    }
    Ok(Volume {
        geometry: g.clone(),
        data: grown
            .iter()
            .zip(&cart.data)
            .map(|(&b, &c)| b || c)
            .collect(),
    })
}

/// Connected-component labelling result. Component `i + 1` has size `sizes[i]`.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Volume<u32>,
    pub sizes: Vec<usize>,
}

/// Label connected components, numbered from 1 by decreasing size; equal
/// sizes are ordered by their smallest linear voxel index.
pub fn connected_components(m: &BinaryMask, c: Connectivity) -> Components {
    let g = &m.geometry;
    let offsets = c.offsets();
    let mut raw = vec![0u32; g.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !m.data[start] || raw[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        raw[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let p = g.coords(idx).map(|v| v as i64);
            for o in &offsets {
                let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                if !g.contains(q) {
                    continue;
                }
                let qi = g.index(q[0] as usize, q[1] as usize, q[2] as usize);
                if m.data[qi] && raw[qi] == 0 {
                    raw[qi] = id;
                    queue.push_back(qi);
                }
            }
        }
        sizes.push(size);
    }
    // Discovery order is already by smallest voxel index; a stable sort keeps it for ties.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    let mut relabel = vec![0u32; sizes.len() + 1];
    for (new, &old) in order.iter().enumerate() {
        relabel[old + 1] = new as u32 + 1;
    }
    Components {
        labels: Volume {
            geometry: g.clone(),
            data: raw.iter().map(|&l| relabel[l as usize]).collect(),
        },
        sizes: order.iter().map(|&o| sizes[o]).collect(),
    }
}

/// Cartilage voxels on the bone–cartilage interface:
/// `boundary(cart) ∩ boundary(invert(fill_gap(cart, bone) − cart))`.
pub fn inner_surface_voxels(
    cart: &BinaryMask,
    bone: &BinaryMask,
    conn: Connectivity,
    gap: GapFill,
) -> Result<BinaryMask> {
    let filled = fill_gap(cart, bone, gap)?;
    let bone_side = filled.difference(cart);
    let b1 = boundary(cart, conn);
    let b2 = boundary(&invert(&bone_side), conn);
    Ok(b1.intersection(&b2))
}

/// Cartilage boundary voxels that are not on the bone interface.
pub fn outer_surface_voxels(
    cart: &BinaryMask,
    inner: &BinaryMask,
    conn: Connectivity,
) -> Result<BinaryMask> {
    cart.geometry
        .ensure_same_grid(&inner.geometry, "cartilage and inner surface")?;
    let b = boundary(cart, conn);
    if !inner.is_subset_of(&b) {
        return Err(Error::invalid(
            "inner surface voxels are not a subset of the cartilage boundary",
        ));
    }
    Ok(b.difference(inner))
}
