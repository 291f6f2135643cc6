use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Offsets of every weight block inside the flat parameter vector.
///
/// Blocks are row-major with one row per output unit:
/// `φ_e`: `we1 [H x (2K+1+B)]`, `be1 [H]`, `we2 [E x H]`, `be2 [E]`;
/// `φ_h`: `wh1 [H x (K+E+1)]`, `bh1 [H]`, `wh2 [K x H]`, `bh2 [K]`;
/// `φ_x`: `wx1 [H x E]`, `bx1 [H]`, `wx2 [1 x H]`, `bx2 [1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub bonds: usize,
    pub hidden: usize,
    pub msg: usize,
    pub in_e: usize,
    pub in_h: usize,
    pub we1: usize,
    pub be1: usize,
    pub we2: usize,
    pub be2: usize,
    pub wh1: usize,
    pub bh1: usize,
    pub wh2: usize,
    pub bh2: usize,
    pub wx1: usize,
    pub bx1: usize,
    pub wx2: usize,
    pub bx2: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(k: usize, bonds: usize, width: usize) -> Self {
        let (hidden, msg) = (width, width);
        let in_e = 2 * k + 1 + bonds;
        let in_h = k + msg + 1;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let we1 = take(hidden * in_e);
        let be1 = take(hidden);
        let we2 = take(msg * hidden);
        let be2 = take(msg);
        let wh1 = take(hidden * in_h);
        let bh1 = take(hidden);
        let wh2 = take(k * hidden);
        let bh2 = take(k);
        let wx1 = take(hidden * msg);
        let bx1 = take(hidden);
        let wx2 = take(hidden);
        let bx2 = take(1);
        Self {
            k,
            bonds,
            hidden,
            msg,
            in_e,
            in_h,
            we1,
            be1,
            we2,
            be2,
            wh1,
            bh1,
            wh2,
            bh2,
            wx1,
            bx1,
            wx2,
            bx2,
            len: at,
        }
    }

    /// `(offset, rows, cols)` of every weight matrix followed by its bias.
    fn layers(&self) -> [(usize, usize, usize, usize); 6] {
        [
            (self.we1, self.hidden, self.in_e, self.be1),
            (self.we2, self.msg, self.hidden, self.be2),
            (self.wh1, self.hidden, self.in_h, self.bh1),
            (self.wh2, self.k, self.hidden, self.bh2),
            (self.wx1, self.hidden, self.msg, self.bx1),
            (self.wx2, 1, self.hidden, self.bx2),
        ]
    }
}

/// All learnable weights of the message-passing differential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgnnParams {
    k: usize,
    bonds: usize,
    width: usize,
    data: Vec<f64>,
}

impl EgnnParams {
    pub fn zeros(k: usize, bonds: usize, width: usize) -> Self {
        let len = Layout::new(k, bonds, width).len;
        Self {
            k,
            bonds,
            width,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(k: usize, bonds: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == Layout::new(k, bonds, width).len).then_some(Self {
            k,
            bonds,
            width,
            data,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.k, self.bonds, self.width)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bonds(&self) -> usize {
        self.bonds
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Zeroes the output layer of `φ_h`, making the differential vanish.
    pub fn zero_output_layer(&mut self) {
        let l = self.layout();
        self.data[l.wh2..l.bh2 + l.k].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero, drawn layer by
/// layer from a ChaCha8 stream seeded with `seed`.
pub fn init_params(seed: u64, k: usize, bonds: usize, width: usize) -> EgnnParams {
    let mut p = EgnnParams::zeros(k, bonds, width);
    let layout = p.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (w, rows, cols, _) in layout.layers() {
        let bound = 1.0 / (cols as f64).sqrt();
        for v in &mut p.data[w..w + rows * cols] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    p
}
