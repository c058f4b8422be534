use rand::Rng;

use crate::autograd::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Mode;

impl Tape {
    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let y = x.zip_map(
            &crate::tensor::Tensor::from_parts(x.dims().to_vec(), mask.clone()),
            |a, m| a * m,
        )?;
        self.push(y, &[input], Op::Dropout { input, mask })
    }
}
