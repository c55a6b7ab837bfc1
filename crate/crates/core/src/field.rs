use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real spatio-temporal sample array laid out `[T, C, spatial…]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    data: Vec<f64>,
    steps: usize,
    channels: usize,
    extents: Vec<usize>,
}

impl Field {
    pub fn new(data: Vec<f64>, steps: usize, channels: usize, extents: Vec<usize>) -> Result<Self> {
        if extents.is_empty() || extents.len() > 3 {
            return Err(Error::shape("field", format!("{} spatial axes", extents.len())));
        }
        if extents.contains(&0) {
            return Err(Error::shape("field", format!("zero spatial extent in {extents:?}")));
        }
        if channels == 0 {
            return Err(Error::shape("field", "zero channels"));
        }
        let expect = steps * channels * extents.iter().product::<usize>();
        if data.len() != expect {
            return Err(Error::shape(
                "field",
                format!("{} values for [T={steps}, C={channels}, {extents:?}]", data.len()),
            ));
        }
        Ok(Field {
            data,
            steps,
            channels,
            extents,
        })
    }

    pub fn zeros(steps: usize, channels: usize, extents: &[usize]) -> Result<Self> {
        let n = steps * channels * extents.iter().product::<usize>();
        Field::new(vec![0.0; n], steps, channels, extents.to_vec())
    }

    /// Stacks single-step frames of identical layout.
    pub fn from_frames(frames: &[Field]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::shape("field", "no frames to stack"))?;
        let mut data = Vec::with_capacity(first.data.len() * frames.len());
        let mut steps = 0;
        for f in frames {
            if f.channels != first.channels || f.extents != first.extents {
                return Err(Error::shape("field", "frames disagree on layout"));
            }
            data.extend_from_slice(&f.data);
            steps += f.steps;
        }
        Field::new(data, steps, first.channels, first.extents.clone())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    /// Points per channel per timestep.
    pub fn points(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, t: usize, c: usize) -> &[f64] {
        let p = self.points();
        let off = (t * self.channels + c) * p;
        &self.data[off..off + p]
    }

    pub fn channel_mut(&mut self, t: usize, c: usize) -> &mut [f64] {
        let p = self.points();
        let off = (t * self.channels + c) * p;
        &mut self.data[off..off + p]
    }

    /// Timesteps `start..end` as a new field.
    pub fn time_slice(&self, start: usize, end: usize) -> Result<Field> {
        if start > end || end > self.steps {
            return Err(Error::shape(
                "field",
                format!("time range {start}..{end} of {} steps", self.steps),
            ));
        }
        let step = self.channels * self.points();
        Field::new(
            self.data[start * step..end * step].to_vec(),
            end - start,
            self.channels,
            self.extents.clone(),
        )
    }

    pub fn frame(&self, t: usize) -> Result<Field> {
        self.time_slice(t, t + 1)
    }

    /// Appends the timesteps of `other`.
    pub fn append(&mut self, other: &Field) -> Result<()> {
        if other.channels != self.channels || other.extents != self.extents {
            return Err(Error::shape("field", "append of mismatched layout"));
        }
        self.data.extend_from_slice(&other.data);
        self.steps += other.steps;
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Field {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= a);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
