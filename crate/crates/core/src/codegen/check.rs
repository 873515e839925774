//! Static flow checks: mode gating, index bounds, write-before-read of
//! crossbars and independence inside parallel blocks.

use std::collections::HashMap;

use super::{CoreParam, DcomFunc, Flow, Level, MetaOp, Region, ShiftAcc, Stmt};
use crate::arch::{HwSpec, Mode};
use crate::error::{Error, Result};
use crate::lowering::CimGeom;

/// What a crossbar currently holds: tile symbol and the written row span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct XbContent {
    pub tile: String,
    pub lo: u32,
    pub hi: u32,
}

pub type XbMap = HashMap<(u32, u32), XbContent>;

/// Applies a write op to the crossbar map.
pub fn record_write(xbs: &mut XbMap, op: &MetaOp, flow: &Flow) -> Result<()> {
    match op {
        MetaOp::WriteXb { core, xb, tile } => {
            let t = flow.tiles.get(tile).ok_or_else(|| Error::Semantic(format!("unknown tile `{tile}`")))?;
            xbs.insert((*core, *xb), XbContent { tile: tile.clone(), lo: 0, hi: t.tile.rows.saturating_sub(1) });
        }
        MetaOp::WriteRows { core, xb, lo, hi, tile } => {
            if !flow.tiles.contains_key(tile) {
                return Err(Error::Semantic(format!("unknown tile `{tile}`")));
            }
            xbs.insert((*core, *xb), XbContent { tile: tile.clone(), lo: *lo, hi: *hi });
        }
        _ => {}
    }
    Ok(())
}

/// Input rows `[lo, hi)` a band of output rows reads.
pub fn band_input_rows(geom: &CimGeom, lo: u32, hi: u32) -> (u32, u32) {
    match *geom {
        CimGeom::Conv { h, r, stride, pad, .. } => {
            if lo >= hi {
                return (0, 0);
            }
            let a = (lo * stride).saturating_sub(pad);
            let b = ((hi - 1) * stride + r).saturating_sub(pad).min(h);
            (a, b.max(a))
        }
        CimGeom::Fc { .. } => (0, 1),
    }
}

/// Input and output regions of replica `r` of a `read_core`.
pub fn read_core_regions(p: &CoreParam, r: u32, src: u64, des: u64) -> (Region, Region) {
    let (lo, hi) = p.band(r);
    match p.geom {
        CimGeom::Conv { c, w, k, wo, .. } => {
            let (a, b) = band_input_rows(&p.geom, lo, hi);
            (
                Region::new(Level::L0, src, (b - a) as u64 * w as u64 * c as u64),
                Region::new(Level::L0, des, (hi - lo) as u64 * wo as u64 * k as u64),
            )
        }
        CimGeom::Fc { n, k, .. } => (Region::new(Level::L0, src, n as u64), Region::new(Level::L0, des, k as u64)),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Footprint {
    pub reads: Vec<Region>,
    pub writes: Vec<Region>,
}

pub fn core_param<'a>(flow: &'a Flow, name: &str) -> Result<&'a CoreParam> {
    flow.params.get(name).ok_or_else(|| Error::Semantic(format!("unknown param `{name}`")))
}

/// Buffer regions an op reads and writes.
pub fn footprint(op: &MetaOp, flow: &Flow, xbs: &XbMap) -> Result<Footprint> {
    let content = |core: u32, xb: u32| {
        xbs.get(&(core, xb))
            .ok_or_else(|| Error::Semantic(format!("read of crossbar ({core},{xb}) before any write")))
    };
    let cols = |c: &XbContent| flow.tiles[&c.tile].tile.cols as u64;
    Ok(match op {
        MetaOp::ReadCore { param, core, src, des, .. } => {
            let p = core_param(flow, param)?;
            let r = p
                .cores
                .iter()
                .position(|c| c == core)
                .ok_or_else(|| Error::Semantic(format!("core {core} is not a replica of `{param}`")))?;
            let (i, o) = read_core_regions(p, r as u32, *src, *des);
            Footprint { reads: vec![i], writes: vec![o] }
        }
        MetaOp::ReadXb { core, xb, src, des } => {
            let c = content(*core, *xb)?;
            let rows = flow.tiles[&c.tile].tile.rows as u64;
            Footprint {
                reads: vec![Region::new(Level::L1(*core), *src, rows)],
                writes: vec![Region::new(Level::L1(*core), *des, cols(c))],
            }
        }
        MetaOp::ReadRows { core, xb, lo, hi, src, des } => {
            let c = content(*core, *xb)?;
            Footprint {
                reads: vec![Region::new(Level::L1(*core), *src, (hi + 1 - lo) as u64)],
                writes: vec![Region::new(Level::L1(*core), *des, cols(c))],
            }
        }
        MetaOp::WriteXb { .. } | MetaOp::WriteRows { .. } | MetaOp::Reprogram { .. } => Footprint::default(),
        MetaOp::Mov { src_level, src, des_level, des, len } => Footprint {
            reads: vec![Region::new(*src_level, *src, *len)],
            writes: vec![Region::new(*des_level, *des, *len)],
        },
        MetaOp::Dcom { func, imm, level, srcs, des, len } => {
            let src_lens: Vec<u64> = match func {
                DcomFunc::ShiftAcc => {
                    let sa = ShiftAcc::from_imm(imm)
                        .ok_or_else(|| Error::Semantic("shift_acc takes 6 immediates".into()))?;
                    if srcs.len() != 2 {
                        return Err(Error::Semantic("shift_acc takes 2 sources".into()));
                    }
                    vec![len * sa.planes as u64, sa.xlen as u64]
                }
                DcomFunc::MaxPool | DcomFunc::AvgPool => {
                    let [_, _, c, h, w] = imm[..] else {
                        return Err(Error::Semantic("pool takes [k,s,c,h,w]".into()));
                    };
                    if srcs.len() != 1 {
                        return Err(Error::Semantic("pool takes 1 source".into()));
                    }
                    vec![(c * h * w) as u64]
                }
                DcomFunc::Relu => {
                    if srcs.len() != 1 {
                        return Err(Error::Semantic("relu takes 1 source".into()));
                    }
                    vec![*len]
                }
                DcomFunc::Add => {
                    if srcs.is_empty() {
                        return Err(Error::Semantic("add needs sources".into()));
                    }
                    vec![*len; srcs.len()]
                }
            };
            Footprint {
                reads: srcs.iter().zip(src_lens).map(|(&s, l)| Region::new(*level, s, l)).collect(),
                writes: vec![Region::new(*level, *des, *len)],
            }
        }
    })
}

fn check_bounds(op: &MetaOp, hw: &HwSpec) -> Result<()> {
    let bad = |m: String| Err(Error::Semantic(m));
    let core_ok = |c: u32| c < hw.chip.core_number;
    let lvl_ok = |l: &Level| match l {
        Level::L0 => true,
        Level::L1(c) => core_ok(*c),
    };
    if let Some((core, xb)) = op.crossbar() {
        if !core_ok(core) || xb >= hw.core.xb_number {
            return bad(format!("crossbar ({core},{xb}) outside the chip"));
        }
    }
    match op {
        MetaOp::ReadCore { core, .. } if !core_ok(*core) => bad(format!("core {core} outside the chip")),
        MetaOp::ReadRows { lo, hi, .. } | MetaOp::WriteRows { lo, hi, .. } if lo > hi || *hi >= hw.xbar.xb_rows => {
            bad(format!("row span {lo}..{hi} outside 0..{}", hw.xbar.xb_rows))
        }
        MetaOp::ReadRows { lo, hi, .. } if hi - lo + 1 > hw.xbar.parallel_row => {
            bad(format!("row span {lo}..{hi} activates {} rows, parallel_row is {}", hi - lo + 1, hw.xbar.parallel_row))
        }
        MetaOp::Mov { src_level, des_level, .. } if !lvl_ok(src_level) || !lvl_ok(des_level) => {
            bad(format!("buffer level outside the chip in {op:?}"))
        }
        MetaOp::Dcom { level, .. } if !lvl_ok(level) => bad(format!("buffer level outside the chip in {op:?}")),
        _ => Ok(()),
    }
}

fn check_mode(op: &MetaOp, mode: Mode) -> Result<()> {
    let ok = match op {
        MetaOp::ReadCore { .. } => mode == Mode::Cm,
        MetaOp::ReadXb { .. } | MetaOp::WriteXb { .. } => mode != Mode::Cm,
        MetaOp::ReadRows { .. } | MetaOp::WriteRows { .. } => mode == Mode::Wlm,
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Semantic(format!("{op:?} is not available in {mode} mode")))
    }
}

/// Full static check of a flow against an architecture.
pub fn check_flow(flow: &Flow, hw: &HwSpec) -> Result<()> {
    let mut xbs = XbMap::new();
    for stmt in &flow.stmts {
        for op in stmt.ops() {
            check_mode(op, hw.mode)?;
            check_bounds(op, hw)?;
            if let MetaOp::ReadRows { core, xb, lo, hi, .. } = op {
                if let Some(c) = xbs.get(&(*core, *xb)) {
                    if lo < &c.lo || hi > &c.hi {
                        return Err(Error::Semantic(format!(
                            "rows {lo}..{hi} of ({core},{xb}) lie outside the written rows {}..{}",
                            c.lo, c.hi
                        )));
                    }
                }
            }
            if let MetaOp::ReadCore { param, .. } = op {
                core_param(flow, param)?;
            }
        }
        if let Stmt::Parallel(ops) = stmt {
            check_parallel(ops, flow, &xbs)?;
        }
        for op in stmt.ops() {
            if op.is_write() {
                record_write(&mut xbs, op, flow)?;
            } else {
                footprint(op, flow, &xbs)?;
            }
        }
    }
    Ok(())
}

/// Members of a parallel block must not share a unit, write overlapping
/// regions, or read what another member writes.
pub fn check_parallel(ops: &[MetaOp], flow: &Flow, xbs: &XbMap) -> Result<()> {
    let mut units = Vec::new();
    let mut prints = Vec::new();
    for op in ops {
        let unit = match op {
            MetaOp::ReadCore { core, .. } => Some((u32::MAX, *core)),
            _ => op.crossbar(),
        };
        if let Some(u) = unit {
            if units.contains(&u) {
                return Err(Error::ParallelConflict(format!("unit {u:?} used twice in one block")));
            }
            units.push(u);
        }
        prints.push(if op.is_write() { Footprint::default() } else { footprint(op, flow, xbs)? });
    }
    for (i, a) in prints.iter().enumerate() {
        for (j, b) in prints.iter().enumerate() {
            if i == j {
                continue;
            }
            for w in &a.writes {
                if b.writes.iter().any(|x| i < j && x.overlaps(w)) || b.reads.iter().any(|r| r.overlaps(w)) {
                    return Err(Error::ParallelConflict(format!(
                        "{} writes {w:?} which another member of its block touches",
                        super::text::op_text(&ops[i])
                    )));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::codegen::parse_flow;

    fn hw(mode: &str) -> HwSpec {
        parse_arch(&format!(
            r#"{{"mode": "{mode}", "chip": {{"core_number": 2}}, "core": {{"xb_number": 2}},
                "xbar": {{"xb_rows": 32, "xb_cols": 128, "parallel_row": 16, "dac_bits": 8,
                         "adc_bits": 8, "cell_type": "ReRAM", "cell_precision_bits": 2}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn span_beyond_parallel_row_is_semantic() {
        let f = parse_flow("cim.read_rows(0,0,0,31,0,0)").unwrap();
        match check_flow(&f, &hw("WLM")) {
            Err(Error::Semantic(m)) => assert!(m.contains("parallel_row")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mode_gating() {
        let f = parse_flow("cim.read_rows(0,0,0,15,0,0)").unwrap();
        assert!(matches!(check_flow(&f, &hw("XBM")), Err(Error::Semantic(_))));
        let f = parse_flow("cim.write_xb(0,0,t0)").unwrap();
        assert!(matches!(check_flow(&f, &hw("CM")), Err(Error::Semantic(_))));
    }

    #[test]
    fn read_before_write_and_conflicts() {
        let f = parse_flow("cim.read_xb(0,0,0,0)").unwrap();
        assert!(matches!(check_flow(&f, &hw("XBM")), Err(Error::Semantic(_))));
        let f = parse_flow("parallel{mov(L0,0,L1.0,0,4),mov(L0,8,L1.0,2,4)}").unwrap();
        assert!(matches!(check_flow(&f, &hw("XBM")), Err(Error::ParallelConflict(_))));
        let f = parse_flow("parallel{mov(L0,0,L1.0,0,4),mov(L1.0,1,L0,100,1)}").unwrap();
        assert!(matches!(check_flow(&f, &hw("XBM")), Err(Error::ParallelConflict(_))));
        let f = parse_flow("parallel{mov(L0,0,L1.0,0,4),mov(L0,0,L1.1,0,4)}").unwrap();
        check_flow(&f, &hw("XBM")).unwrap();
        let f = parse_flow("mov(L0,0,L1.5,0,4)").unwrap();
        assert!(matches!(check_flow(&f, &hw("XBM")), Err(Error::Semantic(_))));
    }
}
