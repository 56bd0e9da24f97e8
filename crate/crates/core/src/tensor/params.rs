use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::io_util::{read_str, write_str};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

/// Gradient accumulators keyed like [`Params`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

/// Parameters together with their gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub values: Params,
    pub grads: Gradients,
}

fn missing(name: &str) -> ! {
    panic!("parameter {name:?} is not registered")
}

impl Params {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn matrix(&self, name: &str) -> ArrayView2<'_, f64> {
        let t = self.0.get(name).unwrap_or_else(|| missing(name));
        t.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        let t = self.0.get(name).unwrap_or_else(|| missing(name));
        t.view().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|t| t.len()).sum()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.0.len() as u32)?;
        for (name, t) in &self.0 {
            write_str(w, name)?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |msg: String| IoError::new(ErrorKind::InvalidData, msg);
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let name = read_str(r)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            if ndim > 8 {
                return Err(bad(format!("parameter {name} has {ndim} dimensions")));
            }
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            if count > (1 << 28) {
                return Err(bad(format!("parameter {name} is implausibly large")));
            }
            let mut data = vec![0f64; count];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("parameter {name} holds non-finite values")));
            }
            let t = Tensor::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(e.to_string()))?;
            if map.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
        }
        Ok(Params(map))
    }
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Gradients(
            params
                .0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.raw_dim())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn matrix_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let t = self.0.get_mut(name).unwrap_or_else(|| missing(name));
        t.view_mut().into_dimensionality::<Ix2>().expect("2-d gradient")
    }

    pub fn vector_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        let t = self.0.get_mut(name).unwrap_or_else(|| missing(name));
        t.view_mut().into_dimensionality::<Ix1>().expect("1-d gradient")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero(&mut self) {
        for t in self.0.values_mut() {
            t.fill(0.0);
        }
    }

    /// Element-wise `self += other`; both must share keys and shapes.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (k, t) in self.0.iter_mut() {
            let o = other.0.get(k).unwrap_or_else(|| missing(k));
            *t += o;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: Params) -> Self {
        let grads = Gradients::zeros_like(&values);
        ParamStore { values, grads }
    }

    /// Registers a parameter with a zeroed gradient accumulator.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.values.0.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter {name} registered twice")));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("initial value of {name}")));
        }
        self.grads.0.insert(name.clone(), Tensor::zeros(value.raw_dim()));
        self.values.0.insert(name, value);
        Ok(())
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        self.add(name, Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches data"))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        self.add(name, Tensor::from_elem(IxDyn(shape), value))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.num_scalars()
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }
}
