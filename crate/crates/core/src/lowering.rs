//! Weight-matrix derivation, bit slicing and virtual-crossbar tiling.
//!
//! Conventions used throughout the compiler and simulator:
//! * activations live in buffers in HWC order, one element per address;
//! * the conv im2col row index is `(r * S + s) * C + c`, so a kernel row of a
//!   window is one contiguous HWC run;
//! * FC rows follow the HWC flattening of the input;
//! * weights are stored offset-binary (`w + 2^(W-1)`) and sliced into unsigned
//!   `cell_precision_bits` planes; the offset is removed digitally using the
//!   sum of the input vector.

use serde::{Deserialize, Serialize};

use crate::arch::HwSpec;
use crate::error::{Error, Result};
use crate::graph::{Attrs, CompGraph, OpNode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitBinding {
    /// Bit planes spread across adjacent crossbar columns.
    #[default]
    Xbc,
    /// Bit planes on separate crossbars.
    Xb,
}

/// Rows bind to crossbar rows and columns to crossbar columns; only the
/// placement of weight bits is configurable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimBinding {
    pub b_to: BitBinding,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub logical_rows: u32,
    pub logical_cols: u32,
    pub weight_bits: u32,
    pub planes: u32,
    pub phys_rows: u32,
    pub phys_cols: u32,
    pub binding: BitBinding,
}

impl WeightMatrix {
    /// Physical column holding plane `b` of logical column `k` (within its plane set).
    pub fn phys_col(&self, k: u32, b: u32) -> u32 {
        match self.binding {
            BitBinding::Xbc => k * self.planes + b,
            BitBinding::Xb => k,
        }
    }

    /// Number of separate plane sets that get their own crossbars.
    pub fn tile_planes(&self) -> u32 {
        match self.binding {
            BitBinding::Xbc => 1,
            BitBinding::Xb => self.planes,
        }
    }

    /// Length of the partial-sum vector of one window.
    pub fn psum_len(&self) -> u32 {
        self.phys_cols * self.tile_planes()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VxbPlan {
    pub num_vxb: u32,
    pub v: u32,
    pub h: u32,
    pub planes: u32,
    pub xbars_per_vxb: u32,
    pub core_vxb: u32,
}

/// One physical crossbar's share of a weight matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub index: u32,
    pub vt: u32,
    pub ht: u32,
    pub plane: u32,
    pub row0: u32,
    pub rows: u32,
    pub col0: u32,
    pub cols: u32,
}

impl Tile {
    /// Offset of this tile's columns within the partial-sum vector.
    pub fn psum_offset(&self, wm: &WeightMatrix) -> u32 {
        self.plane * wm.phys_cols + self.col0
    }
}

/// Sliding-window geometry of a CIM operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CimGeom {
    Conv { c: u32, h: u32, w: u32, k: u32, r: u32, s: u32, stride: u32, pad: u32, ho: u32, wo: u32 },
    /// `ic, ih, iw`: shape of the input being flattened.
    Fc { n: u32, k: u32, ic: u32, ih: u32, iw: u32 },
}

impl CimGeom {
    pub fn of(graph: &CompGraph, node: &OpNode) -> Result<CimGeom> {
        let input = graph.spec_of(&node.inputs[0])?;
        match &node.attrs {
            Attrs::Conv { kernel, stride, padding, .. } => {
                let (c, h, w) = input.chw();
                let (_, ho, wo) = node.output.chw();
                Ok(CimGeom::Conv {
                    c: c as u32,
                    h: h as u32,
                    w: w as u32,
                    k: kernel.dims[0] as u32,
                    r: kernel.dims[2] as u32,
                    s: kernel.dims[3] as u32,
                    stride: *stride as u32,
                    pad: *padding as u32,
                    ho: ho as u32,
                    wo: wo as u32,
                })
            }
            Attrs::Fc { weight, .. } => {
                let (c, h, w) = input.chw();
                Ok(CimGeom::Fc {
                    n: weight.dims[1] as u32,
                    k: weight.dims[0] as u32,
                    ic: c as u32,
                    ih: h as u32,
                    iw: w as u32,
                })
            }
            _ => Err(Error::UnsupportedOp(format!("node {} ({}) is digital", node.id, node.kind.name()))),
        }
    }

    pub fn rows(&self) -> u32 {
        match *self {
            CimGeom::Conv { c, r, s, .. } => c * r * s,
            CimGeom::Fc { n, .. } => n,
        }
    }

    pub fn cols(&self) -> u32 {
        match *self {
            CimGeom::Conv { k, .. } | CimGeom::Fc { k, .. } => k,
        }
    }

    /// Output (rows, cols) of the window grid.
    pub fn out_hw(&self) -> (u32, u32) {
        match *self {
            CimGeom::Conv { ho, wo, .. } => (ho, wo),
            CimGeom::Fc { .. } => (1, 1),
        }
    }

    pub fn windows(&self) -> u32 {
        let (a, b) = self.out_hw();
        a * b
    }

    /// Padded input extent (H, W, C) the windows slide over.
    pub fn padded(&self) -> (u32, u32, u32) {
        match *self {
            CimGeom::Conv { c, h, w, pad, .. } => (h + 2 * pad, w + 2 * pad, c),
            CimGeom::Fc { n, .. } => (1, 1, n),
        }
    }

    pub fn pad(&self) -> u32 {
        match *self {
            CimGeom::Conv { pad, .. } => pad,
            CimGeom::Fc { .. } => 0,
        }
    }

    /// Contiguous runs that bring matrix rows `[lo, hi)` of window `win` from
    /// the unpadded HWC input into a window buffer laid out by matrix row.
    /// Runs falling in the padding have no source and are zero-filled.
    pub fn gather(&self, win: u32, lo: u32, hi: u32) -> Vec<GatherRun> {
        match *self {
            CimGeom::Fc { .. } => vec![GatherRun { src: Some(lo), dst: lo, len: hi - lo }],
            CimGeom::Conv { c, h, w, s, stride, pad, wo, .. } => {
                let (oy, ox) = (win / wo, win % wo);
                let mut out: Vec<GatherRun> = Vec::new();
                let mut push = |src: Option<u32>, dst: u32, len: u32| {
                    if len == 0 {
                        return;
                    }
                    if let Some(last) = out.last_mut() {
                        let contiguous = match (last.src, src) {
                            (None, None) => true,
                            (Some(a), Some(b)) => a + last.len == b,
                            _ => false,
                        };
                        if contiguous && last.dst + last.len == dst {
                            last.len += len;
                            return;
                        }
                    }
                    out.push(GatherRun { src, dst, len });
                };
                for m in lo..hi {
                    let ky = m / (s * c);
                    let kx = (m / c) % s;
                    let ci = m % c;
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    let ix = (ox * stride + kx) as i64 - pad as i64;
                    let src = (iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64)
                        .then(|| (iy as u32 * w + ix as u32) * c + ci);
                    push(src, m, 1);
                }
                out
            }
        }
    }

    /// Upper bound on the length of a zero-filled gather run.
    pub fn max_pad_run(&self) -> u32 {
        match *self {
            CimGeom::Conv { pad, .. } if pad > 0 => self.rows(),
            _ => 0,
        }
    }
}

/// One copy of a window gather; `src == None` is padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatherRun {
    pub src: Option<u32>,
    pub dst: u32,
    pub len: u32,
}

pub fn weight_matrix_of(node: &OpNode, hw: &HwSpec, binding: DimBinding) -> Result<WeightMatrix> {
    let (rows, cols, bits) = match &node.attrs {
        Attrs::Conv { kernel, .. } => {
            let d = &kernel.dims;
            (d[1] * d[2] * d[3], d[0], kernel.precision_bits)
        }
        Attrs::Fc { weight, .. } => (weight.dims[1], weight.dims[0], weight.precision_bits),
        _ => return Err(Error::UnsupportedOp(format!("node {} ({}) is digital", node.id, node.kind.name()))),
    };
    let planes = bits.div_ceil(hw.xbar.cell_precision_bits);
    let phys_cols = match binding.b_to {
        BitBinding::Xbc => cols as u32 * planes,
        BitBinding::Xb => cols as u32,
    };
    Ok(WeightMatrix {
        logical_rows: rows as u32,
        logical_cols: cols as u32,
        weight_bits: bits,
        planes,
        phys_rows: rows as u32,
        phys_cols,
        binding: binding.b_to,
    })
}

pub fn vxb_plan(wm: &WeightMatrix, hw: &HwSpec) -> Result<VxbPlan> {
    let v = wm.phys_rows.div_ceil(hw.xbar.xb_rows);
    let h = wm.phys_cols.div_ceil(hw.xbar.xb_cols);
    let planes = wm.tile_planes();
    let xbars_per_vxb = v * h * planes;
    if xbars_per_vxb as u64 > hw.total_crossbars() {
        return Err(Error::Capacity(format!(
            "one replica needs {xbars_per_vxb} crossbars, chip has {}",
            hw.total_crossbars()
        )));
    }
    Ok(VxbPlan { num_vxb: 1, v, h, planes, xbars_per_vxb, core_vxb: hw.core.xb_number / xbars_per_vxb })
}

/// Cores one replica occupies.
pub fn cores_per_replica(plan: &VxbPlan, hw: &HwSpec) -> u32 {
    (plan.xbars_per_vxb * plan.num_vxb).div_ceil(hw.core.xb_number)
}

/// Tiles of one replica in placement order `(vt * h + ht) * planes + plane`.
pub fn tiles(wm: &WeightMatrix, plan: &VxbPlan, hw: &HwSpec) -> Vec<Tile> {
    let (xr, xc) = (hw.xbar.xb_rows, hw.xbar.xb_cols);
    let mut out = Vec::with_capacity(plan.xbars_per_vxb as usize);
    for vt in 0..plan.v {
        for ht in 0..plan.h {
            for plane in 0..plan.planes {
                let row0 = vt * xr;
                let col0 = ht * xc;
                out.push(Tile {
                    index: out.len() as u32,
                    vt,
                    ht,
                    plane,
                    row0,
                    rows: (wm.phys_rows - row0).min(xr),
                    col0,
                    cols: (wm.phys_cols - col0).min(xc),
                });
            }
        }
    }
    out
}

pub fn mvm_count(graph: &CompGraph, node: &OpNode) -> Result<u64> {
    Ok(CimGeom::of(graph, node)?.windows() as u64)
}

/// Rows used by one activation of a replica (the tallest tile).
pub fn rows_used(wm: &WeightMatrix, hw: &HwSpec) -> u32 {
    wm.phys_rows.min(hw.xbar.xb_rows)
}

/// Logical weight matrix (rows x K, row-major) from the node's weight tensor.
pub fn matrix_values(geom: &CimGeom, weights: &[i32]) -> Result<Vec<i32>> {
    let rows = geom.rows() as usize;
    let k = geom.cols() as usize;
    if weights.len() != rows * k {
        return Err(Error::Validation(format!("weight tensor has {} values, expected {}", weights.len(), rows * k)));
    }
    let mut m = vec![0; rows * k];
    match *geom {
        CimGeom::Conv { c, r, s, .. } => {
            let (c, r, s) = (c as usize, r as usize, s as usize);
            for kk in 0..k {
                for ci in 0..c {
                    for ri in 0..r {
                        for si in 0..s {
                            let row = (ri * s + si) * c + ci;
                            m[row * k + kk] = weights[((kk * c + ci) * r + ri) * s + si];
                        }
                    }
                }
            }
        }
        CimGeom::Fc { ic, ih, iw, .. } => {
            // Weight columns are indexed by the CHW flattening of the input.
            let (c, h, w) = (ic as usize, ih as usize, iw as usize);
            for kk in 0..k {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let row = (y * w + x) * c + ci;
                            m[row * k + kk] = weights[kk * rows + (ci * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Offset-binary code of a signed weight.
pub fn encode_weight(w: i32, bits: u32) -> u32 {
    (w + (1 << (bits - 1))) as u32
}

/// Unsigned cell value of plane `b`.
pub fn slice(code: u32, b: u32, cell_bits: u32) -> u32 {
    (code >> (b * cell_bits)) & ((1 << cell_bits) - 1)
}

/// Cell contents (`tile.rows x tile.cols`, row-major) of one tile.
pub fn tile_cells(wm: &WeightMatrix, tile: &Tile, matrix: &[i32], cell_bits: u32) -> Vec<u8> {
    let k = wm.logical_cols as usize;
    let mut cells = vec![0u8; (tile.rows * tile.cols) as usize];
    for rr in 0..tile.rows {
        let row = (tile.row0 + rr) as usize;
        for cc in 0..tile.cols {
            let pc = tile.col0 + cc;
            let (kk, b) = match wm.binding {
                BitBinding::Xbc => (pc / wm.planes, pc % wm.planes),
                BitBinding::Xb => (pc, tile.plane),
            };
            let code = encode_weight(matrix[row * k + kk as usize], wm.weight_bits);
            cells[(rr * tile.cols + cc) as usize] = slice(code, b, cell_bits) as u8;
        }
    }
    cells
}

/// Inverse of slicing: shift-add of the planes minus the offset.
pub fn reassemble(planes: &[u32], cell_bits: u32, bits: u32) -> i32 {
    let code: i64 = planes.iter().enumerate().map(|(b, &p)| (p as i64) << (b as u32 * cell_bits)).sum();
    (code - (1i64 << (bits - 1))) as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::graph::parse_graph;
    use proptest::prelude::*;

    fn example_hw() -> HwSpec {
        parse_arch(
            r#"{"mode": "WLM", "chip": {"core_number": 2}, "core": {"xb_number": 2},
                "xbar": {"xb_rows": 32, "xb_cols": 128, "parallel_row": 16, "dac_bits": 8,
                         "adc_bits": 8, "cell_type": "ReRAM", "cell_precision_bits": 2}}"#,
        )
        .unwrap()
    }

    fn conv_graph() -> CompGraph {
        parse_graph(
            r#"{"inputs": [{"name": "x", "dims": [3, 32, 32]}],
                "nodes": [{"id": 1, "kind": "Conv", "inputs": ["x"],
                           "attrs": {"kernel": {"dims": [32, 3, 3, 3]}, "stride": 1, "padding": 1}},
                          {"id": 2, "kind": "Relu", "inputs": [1]},
                          {"id": 3, "kind": "FC", "inputs": [2], "attrs": {"out_features": 10}}],
                "outputs": [3]}"#,
        )
        .unwrap()
    }

    #[test]
    fn example_conv_matrix() {
        let (g, hw) = (conv_graph(), example_hw());
        let wm = weight_matrix_of(g.node(1), &hw, DimBinding::default()).unwrap();
        assert_eq!((wm.logical_rows, wm.logical_cols), (27, 32));
        assert_eq!((wm.phys_rows, wm.phys_cols), (27, 128));
        let plan = vxb_plan(&wm, &hw).unwrap();
        assert_eq!((plan.v, plan.h, plan.xbars_per_vxb, plan.core_vxb), (1, 1, 1, 2));
        assert_eq!(cores_per_replica(&plan, &hw), 1);
        assert_eq!(mvm_count(&g, g.node(1)).unwrap(), 1024);
        assert_eq!(mvm_count(&g, g.node(3)).unwrap(), 1);
        assert!(matches!(weight_matrix_of(g.node(2), &hw, DimBinding::default()), Err(Error::UnsupportedOp(_))));

        let xb = weight_matrix_of(g.node(1), &hw, DimBinding { b_to: BitBinding::Xb }).unwrap();
        assert_eq!((xb.phys_cols, xb.planes), (32, 4));
    }

    #[test]
    fn fc_identity_slicing() {
        let mut hw = example_hw();
        let g = parse_graph(
            r#"{"inputs": [{"name": "x", "dims": [64, 1, 1]}],
                "nodes": [{"id": 1, "kind": "FC", "inputs": ["x"], "attrs": {"out_features": 10, "weight_bits": 2}}],
                "outputs": [1]}"#,
        )
        .unwrap();
        hw.xbar.xb_rows = 64;
        let wm = weight_matrix_of(g.node(1), &hw, DimBinding::default()).unwrap();
        assert_eq!((wm.phys_rows, wm.phys_cols), (64, 10));
    }

    #[test]
    fn tile_grid_arithmetic() {
        let hw = example_hw();
        let wm = WeightMatrix {
            logical_rows: 100,
            logical_cols: 300,
            weight_bits: 2,
            planes: 1,
            phys_rows: 100,
            phys_cols: 300,
            binding: BitBinding::Xbc,
        };
        let plan = vxb_plan(&wm, &hw);
        // 12 crossbars exceed the 4 on this chip.
        assert!(matches!(plan, Err(Error::Capacity(_))));
        let big = hw.with_cores(8);
        let plan = vxb_plan(&wm, &big).unwrap();
        assert_eq!((plan.v, plan.h, plan.xbars_per_vxb), (4, 3, 12));

        let mut tall = example_hw().with_cores(4);
        tall.xbar.xb_rows = 512;
        let wm = WeightMatrix { phys_rows: 768, logical_rows: 768, ..wm };
        let plan = vxb_plan(&wm, &tall).unwrap();
        assert_eq!(plan.v, 2);
    }

    #[test]
    fn gather_runs_follow_kernel_rows() {
        let geom = CimGeom::Conv { c: 3, h: 32, w: 32, k: 32, r: 3, s: 3, stride: 1, pad: 1, ho: 32, wo: 32 };
        // Window (1, 2): kernel rows read input rows 0, 1, 2 from column 1.
        let runs = geom.gather(34, 0, 27);
        let want: Vec<GatherRun> =
            (0..3).map(|ky| GatherRun { src: Some((ky * 32 + 1) * 3), dst: ky * 9, len: 9 }).collect();
        assert_eq!(runs, want);
        // Window (0, 0): the first kernel row and column are padding.
        let corner = geom.gather(0, 0, 27);
        assert_eq!(corner[0], GatherRun { src: None, dst: 0, len: 12 });
        assert_eq!(corner[1], GatherRun { src: Some(0), dst: 12, len: 6 });
        assert_eq!(corner.iter().map(|r| r.len).sum::<u32>(), 27);
        let split = geom.gather(34, 4, 20);
        assert_eq!(split.iter().map(|r| r.len).sum::<u32>(), 16);
        assert_eq!(split[0], GatherRun { src: Some(3 + 4), dst: 4, len: 5 });
    }

    proptest! {
        #[test]
        fn slices_reassemble(w in -128i32..=127, cell_bits in 1u32..=8) {
            let bits: u32 = 8;
            let planes = bits.div_ceil(cell_bits);
            let code = encode_weight(w, bits);
            let ps: Vec<u32> = (0..planes).map(|b| slice(code, b, cell_bits)).collect();
            prop_assert!(ps.iter().all(|&p| p < (1 << cell_bits)));
            prop_assert_eq!(reassemble(&ps, cell_bits, bits), w);
        }

        #[test]
        fn tiles_cover_matrix_once(rows in 1u32..300, cols in 1u32..300, xr in 1u32..64, xc in 1u32..64,
                                   planes in 1u32..4, xb in proptest::bool::ANY) {
            let mut hw = example_hw().with_cores(100_000);
            hw.xbar.xb_rows = xr;
            hw.xbar.xb_cols = xc;
            hw.xbar.parallel_row = 1;
            let binding = if xb { BitBinding::Xb } else { BitBinding::Xbc };
            let phys_cols = if xb { cols } else { cols * planes };
            let wm = WeightMatrix { logical_rows: rows, logical_cols: cols, weight_bits: 8, planes,
                                    phys_rows: rows, phys_cols, binding };
            let plan = vxb_plan(&wm, &hw).unwrap();
            let ts = tiles(&wm, &plan, &hw);
            prop_assert_eq!(ts.len() as u32, plan.xbars_per_vxb);
            for p in 0..plan.planes {
                let area: u64 = ts.iter().filter(|t| t.plane == p).map(|t| t.rows as u64 * t.cols as u64).sum();
                prop_assert_eq!(area, rows as u64 * phys_cols as u64);
                for t in ts.iter().filter(|t| t.plane == p) {
                    prop_assert!(t.row0 + t.rows <= rows && t.col0 + t.cols <= phys_cols);
                    for u in ts.iter().filter(|u| u.plane == p && u.index != t.index) {
                        let disjoint = t.row0 + t.rows <= u.row0 || u.row0 + u.rows <= t.row0
                            || t.col0 + t.cols <= u.col0 || u.col0 + u.cols <= t.col0;
                        prop_assert!(disjoint);
                    }
                }
            }
        }
    }
}
