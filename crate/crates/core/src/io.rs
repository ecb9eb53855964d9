//! Grid file formats.
//!
//! * CSV: first line `dim,n_axes,h,boundary_width` (values), then one row per
//!   node carrying data: `i,j[,k],value` for potentials or
//!   `i,j[,k],m11,m12,...` (packed upper triangle) for matrix fields. Nodes
//!   without data are omitted.
//! * Binary (little endian): magic `HVGF`, `u32` dim, `u32` node count per
//!   axis (one per axis), `f64` spacing, then the row-major payload: one `f64`
//!   per node (potentials, NaN = no data), `n(n+1)/2` `f64` per node (matrix
//!   fields, NaN = outside region) or one `u8` per node (masks).
//!
//! Both formats reproduce `f64` payloads bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarGrid, SymMatField, BOUNDARY_WIDTH};
use crate::linalg::{packed_len, SymMat};

pub const MAGIC: &[u8; 4] = b"HVGF";

/// Contents of a grid file.
#[derive(Clone, Debug, PartialEq)]
pub enum GridFile {
    Scalar(ScalarGrid),
    Field(SymMatField),
    Mask(GridGeometry, Vec<u8>),
}

fn header_bytes(geom: &GridGeometry, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(geom.dim() as u32).to_le_bytes());
    for _ in 0..geom.dim() {
        out.extend_from_slice(&(geom.nodes_per_axis() as u32).to_le_bytes());
    }
    out.extend_from_slice(&geom.h().to_le_bytes());
}

pub fn scalar_to_bytes(u: &ScalarGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * u.values().len());
    header_bytes(u.geometry(), &mut out);
    for (v, ok) in u.values().iter().zip(u.valid()) {
        let v = if *ok { *v } else { f64::NAN };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn field_to_bytes(f: &SymMatField) -> Vec<u8> {
    let k = packed_len(f.dim());
    let mut out = Vec::with_capacity(32 + 8 * k * f.data().len());
    header_bytes(f.geometry(), &mut out);
    for (m, ok) in f.data().iter().zip(f.region()) {
        for &v in m.packed() {
            let v = if *ok { v } else { f64::NAN };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn mask_to_bytes(geom: &GridGeometry, mask: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + mask.len());
    header_bytes(geom, &mut out);
    out.extend_from_slice(mask);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated grid file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<GridFile> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("missing HVGF magic".into()));
    }
    let dim = c.u32()? as usize;
    if !(2..=3).contains(&dim) {
        return Err(Error::Format(format!("unsupported dimension {dim}")));
    }
    let mut extents = Vec::with_capacity(dim);
    for _ in 0..dim {
        extents.push(c.u32()? as usize);
    }
    if extents.iter().any(|&e| e != extents[0]) {
        return Err(Error::Format(format!("non-uniform extents {extents:?}")));
    }
    let h = c.f64()?;
    let geom = GridGeometry::new(dim, extents[0], h, BOUNDARY_WIDTH)?;
    let nodes = geom.len();
    let rest = buf.len() - c.pos;
    let k = packed_len(dim);
    if rest == nodes {
        let mask = c.take(nodes)?.to_vec();
        return Ok(GridFile::Mask(geom, mask));
    }
    if rest == 8 * nodes {
        let mut values = Vec::with_capacity(nodes);
        for _ in 0..nodes {
            values.push(c.f64()?);
        }
        return Ok(GridFile::Scalar(ScalarGrid::from_values(geom, values)?));
    }
    if rest == 8 * k * nodes {
        let mut data = Vec::with_capacity(nodes);
        let mut region = Vec::with_capacity(nodes);
        let mut e = vec![0.0; k];
        for _ in 0..nodes {
            for v in e.iter_mut() {
                *v = c.f64()?;
            }
            let ok = e.iter().all(|v| !v.is_nan());
            region.push(ok);
            data.push(if ok { SymMat::from_packed(dim, &e) } else { SymMat::zeros(dim) });
        }
        return Ok(GridFile::Field(SymMatField::new(geom, data, region)?));
    }
    Err(Error::Format(format!("payload of {rest} bytes does not match {nodes} nodes")))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<GridFile> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.starts_with(MAGIC) {
        from_bytes(&buf)
    } else {
        from_csv(BufReader::new(buf.as_slice()))
    }
}

fn csv_header(geom: &GridGeometry, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{},{},{},{}", geom.dim(), geom.nodes_per_axis(), geom.h(), geom.boundary_width())?;
    Ok(())
}

fn csv_coords(geom: &GridGeometry, idx: usize, out: &mut impl Write) -> Result<()> {
    let c = geom.coords(idx);
    for (a, ci) in c.iter().enumerate().take(geom.dim()) {
        if a > 0 {
            write!(out, ",")?;
        }
        write!(out, "{ci}")?;
    }
    Ok(())
}

pub fn scalar_to_csv(u: &ScalarGrid, out: &mut impl Write) -> Result<()> {
    let geom = u.geometry();
    csv_header(geom, out)?;
    for i in 0..geom.len() {
        if !u.valid()[i] {
            continue;
        }
        csv_coords(geom, i, out)?;
        writeln!(out, ",{}", u.values()[i])?;
    }
    Ok(())
}

pub fn field_to_csv(f: &SymMatField, out: &mut impl Write) -> Result<()> {
    let geom = f.geometry();
    csv_header(geom, out)?;
    for i in 0..geom.len() {
        if !f.region()[i] {
            continue;
        }
        csv_coords(geom, i, out)?;
        for v in f.at(i).packed() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse {s:?}")))
}

pub fn from_csv(reader: impl BufRead) -> Result<GridFile> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != 4 {
        return Err(Error::Format("line 1: expected dim,n_axes,h,boundary_width".into()));
    }
    let dim: usize = parse(cols[0], 1)?;
    let nodes: usize = parse(cols[1], 1)?;
    let h: f64 = parse(cols[2], 1)?;
    let bw: usize = parse(cols[3], 1)?;
    let geom = GridGeometry::new(dim, nodes, h, bw)?;
    let k = packed_len(dim);
    let mut scalar: Option<(Vec<f64>, Vec<bool>)> = None;
    let mut field: Option<(Vec<SymMat>, Vec<bool>)> = None;
    for (ln, line) in lines.enumerate() {
        let line = line?;
        let lno = ln + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let mut c = [0usize; 3];
        if cols.len() < dim + 1 {
            return Err(Error::Format(format!("line {lno}: too few columns")));
        }
        for a in 0..dim {
            c[a] = parse(cols[a], lno)?;
            if c[a] >= nodes {
                return Err(Error::Format(format!("line {lno}: node index out of range")));
            }
        }
        let idx = geom.index(&c[..dim]);
        let payload = &cols[dim..];
        if payload.len() == 1 {
            if field.is_some() {
                return Err(Error::Format(format!("line {lno}: mixed payload widths")));
            }
            let (vals, ok) = scalar.get_or_insert_with(|| (vec![0.0; geom.len()], vec![false; geom.len()]));
            vals[idx] = parse(payload[0], lno)?;
            ok[idx] = true;
        } else if payload.len() == k {
            if scalar.is_some() {
                return Err(Error::Format(format!("line {lno}: mixed payload widths")));
            }
            let (data, ok) =
                field.get_or_insert_with(|| (vec![SymMat::zeros(dim); geom.len()], vec![false; geom.len()]));
            let mut e = vec![0.0; k];
            for (v, s) in e.iter_mut().zip(payload) {
                *v = parse(s, lno)?;
            }
            data[idx] = SymMat::from_packed(dim, &e);
            ok[idx] = true;
        } else {
            return Err(Error::Format(format!("line {lno}: unexpected column count {}", cols.len())));
        }
    }
    match (scalar, field) {
        (Some((v, ok)), None) => Ok(GridFile::Scalar(ScalarGrid::from_parts(geom, v, ok)?)),
        (None, Some((d, ok))) => Ok(GridFile::Field(SymMatField::new(geom, d, ok)?)),
        _ => Err(Error::Format("CSV has no node rows".into())),
    }
}

pub fn write_scalar(path: &Path, u: &ScalarGrid) -> Result<()> {
    if is_csv(path) {
        let mut buf = Vec::new();
        scalar_to_csv(u, &mut buf)?;
        write_bytes(path, &buf)
    } else {
        write_bytes(path, &scalar_to_bytes(u))
    }
}

pub fn write_field(path: &Path, f: &SymMatField) -> Result<()> {
    if is_csv(path) {
        let mut buf = Vec::new();
        field_to_csv(f, &mut buf)?;
        write_bytes(path, &buf)
    } else {
        write_bytes(path, &field_to_bytes(f))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{difference_quotient, hessian_field, make_grid};
    use proptest::prelude::*;

    fn random_grid(seed: u64, dim: usize) -> ScalarGrid {
        let geom = make_grid(dim, 11, 1.0).unwrap().geometry().clone();
        let mut state = seed | 1;
        let vals = (0..geom.len())
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                f64::from_bits(state >> 2) // arbitrary finite bit patterns
            })
            .map(|v| if v.is_finite() { v } else { 1.0 })
            .collect();
        ScalarGrid::from_values(geom, vals).unwrap()
    }

    proptest! {
        #[test]
        fn scalar_roundtrips_bit_exactly(seed in any::<u64>(), dim in 2usize..=3) {
            let u = random_grid(seed, dim);
            let GridFile::Scalar(b) = from_bytes(&scalar_to_bytes(&u)).unwrap() else { panic!() };
            prop_assert_eq!(&b, &u);
            let mut csv = Vec::new();
            scalar_to_csv(&u, &mut csv).unwrap();
            let GridFile::Scalar(c) = from_csv(csv.as_slice()).unwrap() else { panic!() };
            for (x, y) in c.values().iter().zip(u.values()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn field_and_shrunken_grids_roundtrip() {
        let geom = make_grid(2, 13, 1.0).unwrap().geometry().clone();
        let u = ScalarGrid::sample(geom, |x| (x[0] * 1.3).exp() * (x[1] + 0.1).sin());
        let f = hessian_field(&u);
        let GridFile::Field(b) = from_bytes(&field_to_bytes(&f)).unwrap() else { panic!() };
        assert_eq!(b, f);
        let mut csv = Vec::new();
        field_to_csv(&f, &mut csv).unwrap();
        let GridFile::Field(c) = from_csv(csv.as_slice()).unwrap() else { panic!() };
        assert_eq!(c, f);

        let q = difference_quotient(&u, 1, u.h()).unwrap();
        let GridFile::Scalar(b) = from_bytes(&scalar_to_bytes(&q)).unwrap() else { panic!() };
        assert_eq!(b, q);
    }

    #[test]
    fn mask_roundtrip_and_bad_input() {
        let geom = make_grid(3, 11, 1.0).unwrap().geometry().clone();
        let mask: Vec<u8> = (0..geom.len()).map(|i| (i % 3) as u8).collect();
        let GridFile::Mask(g, m) = from_bytes(&mask_to_bytes(&geom, &mask)).unwrap() else { panic!() };
        assert_eq!(g, geom);
        assert_eq!(m, mask);
        assert!(from_bytes(b"XXXX").is_err());
        let mut bytes = mask_to_bytes(&geom, &mask);
        bytes.pop();
        assert!(from_bytes(&bytes).is_err());
        assert!(from_csv("2,11,0.2\n".as_bytes()).is_err());
    }
}
