//! Functional execution of a flow with bit-exact integer semantics.

use std::collections::HashMap;

use super::tensor::{chw_to_hwc, hwc_to_chw, Tensor, TensorMap};
use crate::arch::{HwSpec, Limit};
use crate::codegen::check::{band_input_rows, check_parallel, core_param, record_write, XbMap};
use crate::codegen::{requantize, sat8, DcomFunc, Flow, Level, MetaOp, ShiftAcc, Stmt, TileSym};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::lowering::{encode_weight, matrix_values, slice, tile_cells, CimGeom};

/// Cells of one crossbar; `None` was never written.
struct Cells {
    cols: u32,
    cells: Vec<Option<u8>>,
}

pub struct MachineState<'a> {
    flow: &'a Flow,
    hw: &'a HwSpec,
    weights: &'a TensorMap,
    l0: Vec<i32>,
    l1: HashMap<u32, Vec<i32>>,
    cells: HashMap<(u32, u32), Cells>,
    contents: XbMap,
    matrices: HashMap<NodeId, Vec<i32>>,
    pub pc: usize,
}

fn chw(d: &[usize]) -> (usize, usize, usize) {
    let g = |i: usize| d.get(i).copied().unwrap_or(1);
    (g(0), g(1), d[2.min(d.len())..].iter().product::<usize>().max(1))
}

fn words(l: Limit) -> Option<u64> {
    l.finite().map(|bits| bits / 8)
}

impl<'a> MachineState<'a> {
    pub fn new(flow: &'a Flow, hw: &'a HwSpec, tensors: &'a TensorMap) -> Result<Self> {
        let mut m = MachineState {
            flow,
            hw,
            weights: tensors,
            l0: Vec::new(),
            l1: HashMap::new(),
            cells: HashMap::new(),
            contents: XbMap::new(),
            matrices: HashMap::new(),
            pc: 0,
        };
        for d in &flow.inputs {
            let t = tensors.get(&d.name).ok_or_else(|| Error::MissingTensor(d.name.clone()))?;
            let (c, h, w) = chw(&d.dims);
            if t.values.len() != c * h * w {
                return Err(Error::Validation(format!("input `{}` has {} values, expected {}", d.name, t.values.len(), c * h * w)));
            }
            m.store(Level::L0, d.addr, &chw_to_hwc(&t.values, c, h, w))?;
        }
        Ok(m)
    }

    fn cap(&self, level: Level) -> Option<u64> {
        match level {
            Level::L0 => words(self.hw.chip.l0_size_bits),
            Level::L1(_) => words(self.hw.core.l1_size_bits),
        }
    }

    fn check_range(&self, level: Level, at: u64, len: u64) -> Result<()> {
        if let Some(cap) = self.cap(level) {
            if at + len > cap {
                return Err(Error::AddressOutOfRange(format!("{level} [{at}, {}) exceeds {cap} words", at + len)));
            }
        }
        if let Level::L1(c) = level {
            if c >= self.hw.chip.core_number {
                return Err(Error::AddressOutOfRange(format!("{level} does not exist")));
            }
        }
        Ok(())
    }

    pub fn load(&self, level: Level, at: u64, len: u64) -> Result<Vec<i32>> {
        self.check_range(level, at, len)?;
        let buf: &[i32] = match level {
            Level::L0 => &self.l0,
            Level::L1(c) => self.l1.get(&c).map_or(&[], |v| v.as_slice()),
        };
        Ok((at..at + len).map(|i| buf.get(i as usize).copied().unwrap_or(0)).collect())
    }

    pub fn store(&mut self, level: Level, at: u64, vals: &[i32]) -> Result<()> {
        self.check_range(level, at, vals.len() as u64)?;
        let buf = match level {
            Level::L0 => &mut self.l0,
            Level::L1(c) => self.l1.entry(c).or_default(),
        };
        let end = at as usize + vals.len();
        if buf.len() < end {
            buf.resize(end, 0);
        }
        buf[at as usize..end].copy_from_slice(vals);
        Ok(())
    }

    fn matrix(&mut self, node: NodeId, geom: &CimGeom) -> Result<&[i32]> {
        if !self.matrices.contains_key(&node) {
            let name = format!("w{node}");
            let t = self.weights.get(&name).ok_or(Error::MissingTensor(name))?;
            let m = matrix_values(geom, &t.values)?;
            self.matrices.insert(node, m);
        }
        Ok(&self.matrices[&node])
    }

    fn write_cells(&mut self, core: u32, xb: u32, lo: u32, hi: u32, sym: &TileSym) -> Result<()> {
        let (xr, xc) = (self.hw.xbar.xb_rows, self.hw.xbar.xb_cols);
        let cb = self.hw.xbar.cell_precision_bits;
        let m = self.matrix(sym.node, &sym.geom)?.to_vec();
        let data = tile_cells(&sym.wm, &sym.tile, &m, cb);
        let e = self.cells.entry((core, xb)).or_insert_with(|| Cells { cols: xc, cells: vec![None; (xr * xc) as usize] });
        for r in lo..=hi {
            let i = r - lo;
            for c in 0..sym.tile.cols {
                let v = if i < sym.tile.rows { data[(i * sym.tile.cols + c) as usize] } else { 0 };
                e.cells[(r * e.cols + c) as usize] = Some(v);
            }
        }
        Ok(())
    }

    /// Column sums of rows `lo..lo+x.len()` weighted by `x`.
    fn mac(&self, core: u32, xb: u32, lo: u32, x: &[i32], cols: u32) -> Result<Vec<i32>> {
        let e = self.cells.get(&(core, xb)).ok_or(Error::UnwrittenCell { core, xb, row: lo, col: 0 })?;
        let mut out = vec![0i64; cols as usize];
        for (i, &xv) in x.iter().enumerate() {
            let row = lo + i as u32;
            for (c, o) in out.iter_mut().enumerate() {
                let cell = e.cells[(row * e.cols + c as u32) as usize]
                    .ok_or(Error::UnwrittenCell { core, xb, row, col: c as u32 })?;
                *o += xv as i64 * cell as i64;
            }
        }
        Ok(out.into_iter().map(|v| v.clamp(i32::MIN as i64, i32::MAX as i64) as i32).collect())
    }

    fn read_core(&mut self, param: &str, core: u32, src: u64, des: u64) -> Result<()> {
        let p = core_param(self.flow, param)?.clone();
        let r = p
            .cores
            .iter()
            .position(|&c| c == core)
            .ok_or_else(|| Error::Semantic(format!("core {core} is not a replica of `{param}`")))? as u32;
        let (lo, hi) = p.band(r);
        let m = self.matrix(p.node, &p.geom)?.to_vec();
        let rows = p.geom.rows();
        let k = p.geom.cols() as usize;
        let cb = self.hw.xbar.cell_precision_bits;
        let sa = ShiftAcc { planes: p.wm.planes, cell_bits: cb, weight_bits: p.wm.weight_bits, shift: p.shift, xlen: rows, layout: 0 };
        let (wo, row_words, in_lo) = match p.geom {
            CimGeom::Conv { c, w, wo, .. } => (wo, (w * c) as u64, band_input_rows(&p.geom, lo, hi).0),
            CimGeom::Fc { .. } => (1, 0, 0),
        };
        for oy in lo..hi {
            for ox in 0..wo {
                let win = oy * wo + ox;
                let mut x = vec![0i32; rows as usize];
                for run in p.geom.gather(win, 0, rows) {
                    if let Some(s) = run.src {
                        let at = src + s as u64 - in_lo as u64 * row_words;
                        let v = self.load(Level::L0, at, run.len as u64)?;
                        x[run.dst as usize..(run.dst + run.len) as usize].copy_from_slice(&v);
                    }
                }
                let xsum: i64 = x.iter().map(|&v| v as i64).sum();
                let y: Vec<i32> = (0..k)
                    .map(|kk| {
                        let plane = |b: u32| -> i64 {
                            x.iter()
                                .enumerate()
                                .map(|(i, &xv)| {
                                    let code = encode_weight(m[i * k + kk], p.wm.weight_bits);
                                    xv as i64 * slice(code, b, cb) as i64
                                })
                                .sum()
                        };
                        sa.apply(plane, xsum)
                    })
                    .collect();
                self.store(Level::L0, des + ((oy - lo) * wo + ox) as u64 * k as u64, &y)?;
            }
        }
        Ok(())
    }

    fn dcom(&mut self, func: DcomFunc, imm: &[i64], level: Level, srcs: &[u64], des: u64, len: u64) -> Result<()> {
        let out: Vec<i32> = match func {
            DcomFunc::Relu => self.load(level, srcs[0], len)?.into_iter().map(|v| v.max(0)).collect(),
            DcomFunc::Add => {
                let width = imm.first().copied().unwrap_or(32);
                let mut acc = vec![0i64; len as usize];
                for &s in srcs {
                    for (a, v) in acc.iter_mut().zip(self.load(level, s, len)?) {
                        *a += v as i64;
                    }
                }
                acc.into_iter()
                    .map(|v| if width <= 8 { sat8(v) } else { v.clamp(i32::MIN as i64, i32::MAX as i64) as i32 })
                    .collect()
            }
            DcomFunc::ShiftAcc => {
                let sa = ShiftAcc::from_imm(imm).ok_or_else(|| Error::Semantic("shift_acc takes 6 immediates".into()))?;
                let p = self.load(level, srcs[0], len * sa.planes as u64)?;
                let x = self.load(level, srcs[1], sa.xlen as u64)?;
                let xsum: i64 = x.iter().map(|&v| v as i64).sum();
                let planes = sa.planes as usize;
                (0..len as usize)
                    .map(|k| {
                        sa.apply(
                            |b| {
                                let b = b as usize;
                                (if sa.layout == 0 { p[k * planes + b] } else { p[b * len as usize + k] }) as i64
                            },
                            xsum,
                        )
                    })
                    .collect()
            }
            DcomFunc::MaxPool | DcomFunc::AvgPool => {
                let [k, s, c, h, w] = imm[..] else { return Err(Error::Semantic("pool takes [k,s,c,h,w]".into())) };
                let (k, s, c, h, w) = (k as usize, s as usize, c as usize, h as usize, w as usize);
                let x = self.load(level, srcs[0], (c * h * w) as u64)?;
                let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
                let mut out = vec![0; ho * wo * c];
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ci in 0..c {
                            let vals = (0..k).flat_map(|dy| (0..k).map(move |dx| (dy, dx))).map(|(dy, dx)| {
                                x[((oy * s + dy) * w + ox * s + dx) * c + ci] as i64
                            });
                            out[(oy * wo + ox) * c + ci] = if func == DcomFunc::MaxPool {
                                vals.max().unwrap_or(0) as i32
                            } else {
                                vals.sum::<i64>().div_euclid((k * k) as i64) as i32
                            };
                        }
                    }
                }
                out.truncate(len as usize);
                out
            }
        };
        self.store(level, des, &out)
    }

    pub fn exec_op(&mut self, op: &MetaOp) -> Result<()> {
        match op {
            MetaOp::ReadCore { param, core, src, des, .. } => self.read_core(param, *core, *src, *des),
            MetaOp::ReadXb { core, xb, src, des } | MetaOp::ReadRows { core, xb, src, des, .. } => {
                let c = self.contents.get(&(*core, *xb)).ok_or(Error::UnwrittenCell { core: *core, xb: *xb, row: 0, col: 0 })?;
                let t = &self.flow.tiles[&c.tile].tile;
                let (lo, n) = match op {
                    MetaOp::ReadRows { lo, hi, .. } => (*lo, hi + 1 - lo),
                    _ => (0, t.rows),
                };
                let cols = t.cols;
                let x = self.load(Level::L1(*core), *src, n as u64)?;
                let y = self.mac(*core, *xb, lo, &x, cols)?;
                self.store(Level::L1(*core), *des, &y)
            }
            MetaOp::WriteXb { core, xb, tile } | MetaOp::WriteRows { core, xb, tile, .. } => {
                let sym = self.flow.tiles.get(tile).ok_or_else(|| Error::Semantic(format!("unknown tile `{tile}`")))?.clone();
                let (lo, hi) = match op {
                    MetaOp::WriteRows { lo, hi, .. } => (*lo, *hi),
                    _ => (0, sym.tile.rows - 1),
                };
                if hi >= self.hw.xbar.xb_rows || sym.tile.cols > self.hw.xbar.xb_cols {
                    return Err(Error::AddressOutOfRange(format!("tile `{tile}` does not fit crossbar ({core},{xb})")));
                }
                self.write_cells(*core, *xb, lo, hi, &sym)?;
                record_write(&mut self.contents, op, self.flow)
            }
            MetaOp::Dcom { func, imm, level, srcs, des, len } => self.dcom(*func, imm, *level, srcs, *des, *len),
            MetaOp::Mov { src_level, src, des_level, des, len } => {
                let v = self.load(*src_level, *src, *len)?;
                self.store(*des_level, *des, &v)
            }
            MetaOp::Reprogram { .. } => Ok(()),
        }
    }

    pub fn step(&mut self) -> Result<bool> {
        let Some(stmt) = self.flow.stmts.get(self.pc) else { return Ok(false) };
        match stmt {
            Stmt::Op(op) => self.exec_op(op)?,
            Stmt::Parallel(ops) => {
                check_parallel(ops, self.flow, &self.contents)?;
                for op in ops.iter().filter(|o| o.is_write()) {
                    self.exec_op(op)?;
                }
                for op in ops.iter().filter(|o| !o.is_write()) {
                    self.exec_op(op)?;
                }
            }
        }
        self.pc += 1;
        Ok(true)
    }

    pub fn outputs(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for d in &self.flow.outputs {
            let (c, h, w) = chw(&d.dims);
            let v = self.load(Level::L0, d.addr, (c * h * w) as u64)?;
            out.insert(d.name.clone(), Tensor { name: d.name.clone(), dims: d.dims.clone(), values: hwc_to_chw(&v, c, h, w) });
        }
        Ok(out)
    }
}

/// Fails when the flow records a different architecture than `hw`.
pub fn check_arch(flow: &Flow, hw: &HwSpec) -> Result<()> {
    match &flow.arch {
        Some(h) if *h != hw.digest() => Err(Error::HashMismatch { flow: h.clone(), arch: hw.digest() }),
        _ => Ok(()),
    }
}

/// Runs a flow to completion and returns its declared outputs.
pub fn exec_flow(flow: &Flow, hw: &HwSpec, tensors: &TensorMap) -> Result<TensorMap> {
    check_arch(flow, hw)?;
    run_flow(flow, hw, tensors)
}

/// `exec_flow` without the architecture check.
pub fn run_flow(flow: &Flow, hw: &HwSpec, tensors: &TensorMap) -> Result<TensorMap> {
    let mut m = MachineState::new(flow, hw, tensors)?;
    while m.step()? {}
    m.outputs()
}

/// Direct dot product used where the crossbar path is not involved.
pub fn requantized_dot(x: &[i32], w: &[i32], shift: u32) -> i32 {
    requantize(x.iter().zip(w).map(|(&a, &b)| a as i64 * b as i64).sum(), shift)
}
