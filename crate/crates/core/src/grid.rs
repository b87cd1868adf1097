//! Uniform staggered (MAC) grids in two or three dimensions.
//!
//! Cells are indexed with axis 0 varying fastest. Cell `c` covers
//! `[c*h, (c+1)*h)` along every axis; face `c` of axis `a` sits at
//! `c[a]*h` along `a` and at the cell center along the other axes.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellFlag {
    Fluid,
    Empty,
    Solid,
}

/// Dense index arithmetic for a `D`-dimensional box of samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice<const D: usize> {
    pub dims: [usize; D],
}

impl<const D: usize> Lattice<D> {
    pub fn new(dims: [usize; D]) -> Self {
        Self { dims }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: [usize; D]) -> usize {
        let mut idx = 0;
        for a in (0..D).rev() {
            idx = idx * self.dims[a] + c[a];
        }
        idx
    }

    #[inline]
    pub fn coords(&self, mut idx: usize) -> [usize; D] {
        let mut c = [0; D];
        for a in 0..D {
            c[a] = idx % self.dims[a];
            idx /= self.dims[a];
        }
        c
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.dims[..axis].iter().product()
    }

    /// Face-adjacent neighbor of `c` along `axis` in direction `dir` (-1 or +1).
    #[inline]
    pub fn neighbor(&self, c: [usize; D], axis: usize, dir: i32) -> Option<[usize; D]> {
        let mut n = c;
        if dir < 0 {
            if c[axis] == 0 {
                return None;
            }
            n[axis] -= 1;
        } else {
            if c[axis] + 1 >= self.dims[axis] {
                return None;
            }
            n[axis] += 1;
        }
        Some(n)
    }

    /// Visit the indices of all face neighbors of `idx`.
    #[inline]
    pub fn for_each_neighbor(&self, idx: usize, mut f: impl FnMut(usize)) {
        let c = self.coords(idx);
        for a in 0..D {
            let s = self.stride(a);
            if c[a] > 0 {
                f(idx - s);
            }
            if c[a] + 1 < self.dims[a] {
                f(idx + s);
            }
        }
    }
}

/// Multilinear interpolation of samples laid out on `dims` with sample `i`
/// located at `(i + offset) * h`. Positions outside the sample box are clamped.
pub fn sample_lattice<const D: usize>(
    data: &[f64],
    dims: [usize; D],
    h: f64,
    offset: [f64; D],
    pos: [f64; D],
) -> f64 {
    let lat = Lattice::new(dims);
    let mut base = [0usize; D];
    let mut frac = [0.0f64; D];
    for a in 0..D {
        let max = (dims[a] - 1) as f64;
        let g = (pos[a] / h - offset[a]).clamp(0.0, max);
        let i = (g.floor() as usize).min(dims[a].saturating_sub(2));
        base[a] = i;
        frac[a] = if dims[a] > 1 { g - i as f64 } else { 0.0 };
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << D) {
        let mut w = 1.0;
        let mut c = base;
        for a in 0..D {
            if corner >> a & 1 == 1 {
                w *= frac[a];
                c[a] = (c[a] + 1).min(dims[a] - 1);
            } else {
                w *= 1.0 - frac[a];
            }
        }
        if w != 0.0 {
            acc += w * data[lat.index(c)];
        }
    }
    acc
}

/// Corner indices and weights used by [`sample_lattice`]; the particle-to-grid
/// transfer scatters with the same kernel.
pub fn lattice_weights<const D: usize>(
    dims: [usize; D],
    h: f64,
    offset: [f64; D],
    pos: [f64; D],
    mut f: impl FnMut(usize, f64),
) {
    let lat = Lattice::new(dims);
    let mut base = [0usize; D];
    let mut frac = [0.0f64; D];
    for a in 0..D {
        let max = (dims[a] - 1) as f64;
        let g = (pos[a] / h - offset[a]).clamp(0.0, max);
        let i = (g.floor() as usize).min(dims[a].saturating_sub(2));
        base[a] = i;
        frac[a] = if dims[a] > 1 { g - i as f64 } else { 0.0 };
    }
    for corner in 0..(1usize << D) {
        let mut w = 1.0;
        let mut c = base;
        let mut dup = false;
        for a in 0..D {
            if corner >> a & 1 == 1 {
                w *= frac[a];
                if c[a] + 1 >= dims[a] {
                    dup = true;
                }
                c[a] = (c[a] + 1).min(dims[a] - 1);
            } else {
                w *= 1.0 - frac[a];
            }
        }
        if w != 0.0 && !dup {
            f(lat.index(c), w);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacGrid<const D: usize> {
    pub res: [usize; D],
    pub h: f64,
    /// Face-centered velocity components, one array per axis.
    pub u: [Vec<f64>; D],
    /// Cell-centered level set, negative inside the liquid.
    pub phi: Vec<f64>,
    pub pressure: Vec<f64>,
    pub flags: Vec<CellFlag>,
    /// Static obstacle mask; `flags` is Solid wherever this is set.
    pub solid: Vec<bool>,
}

impl<const D: usize> MacGrid<D> {
    pub fn new(res: [usize; D], h: f64) -> Self {
        let cells = Lattice::new(res);
        let n = cells.len();
        let u = std::array::from_fn(|a| vec![0.0; Self::face_lattice_of(res, a).len()]);
        Self {
            res,
            h,
            u,
            phi: vec![level_set_sentinel(res, h); n],
            pressure: vec![0.0; n],
            flags: vec![CellFlag::Empty; n],
            solid: vec![false; n],
        }
    }

    fn face_lattice_of(res: [usize; D], axis: usize) -> Lattice<D> {
        let mut dims = res;
        dims[axis] += 1;
        Lattice::new(dims)
    }

    pub fn cells(&self) -> Lattice<D> {
        Lattice::new(self.res)
    }

    pub fn faces(&self, axis: usize) -> Lattice<D> {
        Self::face_lattice_of(self.res, axis)
    }

    pub fn num_cells(&self) -> usize {
        self.cells().len()
    }

    /// Physical extent of the domain along each axis.
    pub fn extent(&self) -> [f64; D] {
        std::array::from_fn(|a| self.res[a] as f64 * self.h)
    }

    pub fn cell_center(&self, c: [usize; D]) -> [f64; D] {
        std::array::from_fn(|a| (c[a] as f64 + 0.5) * self.h)
    }

    pub fn face_center(&self, axis: usize, c: [usize; D]) -> [f64; D] {
        std::array::from_fn(|a| {
            if a == axis {
                c[a] as f64 * self.h
            } else {
                (c[a] as f64 + 0.5) * self.h
            }
        })
    }

    /// Cell containing `pos`, clamped into the grid.
    pub fn cell_of(&self, pos: [f64; D]) -> [usize; D] {
        std::array::from_fn(|a| {
            let g = (pos[a] / self.h).floor();
            if g <= 0.0 {
                0
            } else {
                (g as usize).min(self.res[a] - 1)
            }
        })
    }

    pub fn cell_index_of(&self, pos: [f64; D]) -> usize {
        self.cells().index(self.cell_of(pos))
    }

    pub fn contains(&self, pos: [f64; D]) -> bool {
        (0..D).all(|a| pos[a] >= 0.0 && pos[a] <= self.res[a] as f64 * self.h)
    }

    pub fn cell_offset() -> [f64; D] {
        [0.5; D]
    }

    pub fn face_offset(axis: usize) -> [f64; D] {
        std::array::from_fn(|a| if a == axis { 0.0 } else { 0.5 })
    }

    fn note_outside(&self, pos: [f64; D]) {
        if cfg!(debug_assertions) && !self.contains(pos) {
            log::debug!("sample at {pos:?} outside the grid; clamped");
        }
    }

    /// Velocity at `pos`, each component read from its own staggered array.
    pub fn velocity_at(&self, pos: [f64; D]) -> [f64; D] {
        self.note_outside(pos);
        std::array::from_fn(|a| {
            sample_lattice(&self.u[a], self.faces(a).dims, self.h, Self::face_offset(a), pos)
        })
    }

    /// Velocity at `pos` from an alternative set of face arrays shaped like `self.u`.
    pub fn velocity_from(&self, u: &[Vec<f64>; D], pos: [f64; D]) -> [f64; D] {
        std::array::from_fn(|a| {
            sample_lattice(&u[a], self.faces(a).dims, self.h, Self::face_offset(a), pos)
        })
    }

    pub fn phi_at(&self, pos: [f64; D]) -> f64 {
        self.note_outside(pos);
        sample_lattice(&self.phi, self.res, self.h, Self::cell_offset(), pos)
    }

    pub fn sample_cells(&self, field: &[f64], pos: [f64; D]) -> f64 {
        sample_lattice(field, self.res, self.h, Self::cell_offset(), pos)
    }

    pub fn is_solid_at(&self, pos: [f64; D]) -> bool {
        if !self.contains(pos) {
            return true;
        }
        self.solid[self.cell_index_of(pos)]
    }

    /// Flags from the sign of `phi`; obstacle cells stay Solid.
    pub fn flags_from_phi(&mut self) {
        for i in 0..self.phi.len() {
            self.flags[i] = if self.solid[i] {
                CellFlag::Solid
            } else if self.phi[i] < 0.0 {
                CellFlag::Fluid
            } else {
                CellFlag::Empty
            };
        }
    }

    /// Box-filter this grid down by an integer `factor`.
    ///
    /// Cell fields average the `factor^D` covered fine cells; each coarse face
    /// averages the `factor^(D-1)` fine faces lying in its plane.
    pub fn downsample(&self, factor: usize) -> Result<MacGrid<D>> {
        if factor == 0 || self.res.iter().any(|&r| r % factor != 0) {
            return Err(Error::NotDivisible {
                res: self.res.to_vec(),
                factor,
            });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let cres: [usize; D] = std::array::from_fn(|a| self.res[a] / factor);
        let mut coarse = MacGrid::new(cres, self.h * factor as f64);
        let fine_cells = self.cells();
        let coarse_cells = coarse.cells();
        let block = factor.pow(D as u32);
        let inv = 1.0 / block as f64;

        for ci in 0..coarse_cells.len() {
            let cc = coarse_cells.coords(ci);
            let mut phi = 0.0;
            let mut p = 0.0;
            let mut solid = 0usize;
            for k in 0..block {
                let mut fc = [0usize; D];
                let mut rem = k;
                for a in 0..D {
                    fc[a] = cc[a] * factor + rem % factor;
                    rem /= factor;
                }
                let fi = fine_cells.index(fc);
                phi += self.phi[fi];
                p += self.pressure[fi];
                if self.solid[fi] {
                    solid += 1;
                }
            }
            coarse.phi[ci] = phi * inv;
            coarse.pressure[ci] = p * inv;
            coarse.solid[ci] = 2 * solid > block;
        }
        coarse.flags_from_phi();

        let plane = factor.pow(D as u32 - 1);
        let pinv = 1.0 / plane as f64;
        for axis in 0..D {
            let cf = coarse.faces(axis);
            let ff = self.faces(axis);
            for fi_c in 0..cf.len() {
                let c = cf.coords(fi_c);
                let mut acc = 0.0;
                for k in 0..plane {
                    let mut fc = [0usize; D];
                    let mut rem = k;
                    for a in 0..D {
                        if a == axis {
                            fc[a] = c[a] * factor;
                        } else {
                            fc[a] = c[a] * factor + rem % factor;
                            rem /= factor;
                        }
                    }
                    acc += self.u[axis][ff.index(fc)];
                }
                coarse.u[axis][fi_c] = acc * pinv;
            }
        }
        Ok(coarse)
    }

    /// Per-cell velocity divergence `sum_a (u_a[+] - u_a[-]) / h`.
    pub fn divergence(&self, cell: [usize; D]) -> f64 {
        let mut div = 0.0;
        for a in 0..D {
            let faces = self.faces(a);
            let mut hi = cell;
            hi[a] += 1;
            div += self.u[a][faces.index(hi)] - self.u[a][faces.index(cell)];
        }
        div / self.h
    }
}

/// Magnitude used for "far from any liquid" level-set values.
pub fn level_set_sentinel<const D: usize>(res: [usize; D], h: f64) -> f64 {
    (res.iter().sum::<usize>() + 1) as f64 * h
}
