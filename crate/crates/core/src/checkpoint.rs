//! Little-endian binary helpers shared by the bank, merge-state and
//! pipeline checkpoint formats. Reals are always stored as `f64`, which is
//! lossless for both scalar types.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: need {n} bytes for {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos as u64;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "bad magic {got:?}, expected {:?}",
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u32("version")?;
        if v != expected {
            return Err(Error::Format {
                offset: at,
                message: format!("unsupported version {v}"),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos as u64;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: format!("{what} is not UTF-8"),
        })
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub out: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.out.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.f64(v);
        }
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.out.extend_from_slice(s.as_bytes());
    }
}

pub(crate) fn write_params<S: crate::Scalar>(w: &mut Writer, p: &crate::nn::ParamVector<S>) {
    w.u32(p.layout().len() as u32);
    for e in p.layout() {
        w.string(&e.name);
        w.u32(e.shape.len() as u32);
        for &d in &e.shape {
            w.u64(d as u64);
        }
    }
    w.u64(p.len() as u64);
    w.f64s(p.values().iter().map(|v| v.as_f64()));
}

pub(crate) fn read_params<S: crate::Scalar>(
    r: &mut Reader<'_>,
) -> Result<crate::nn::ParamVector<S>> {
    let entries = r.u32("layout entries")? as usize;
    let mut shapes = Vec::with_capacity(entries);
    for _ in 0..entries {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        shapes.push((name, shape));
    }
    let n = r.u64("parameter count")? as usize;
    let values: Vec<S> = r.f64s(n, "parameter")?.into_iter().map(S::of).collect();
    let template = crate::nn::ParamVector::<S>::zeros(&shapes);
    crate::nn::ParamVector::new(values, template.layout().to_vec())
}
