//! Probability-ordered streaming of a two-factor product spectrum.
//!
//! Joint classes `(i, j)` have `θ·x = f₁(i) + f₂(j)`. With both factor lists sorted,
//! each row is a sorted run, so joint classes can be produced in ascending `θ·x` by
//! cutting all rows at a common edge and sorting the slab in between. The
//! walk only needs the window where `τ_{θ₀}` has non-negligible mass; the number of
//! states below the window start is counted exactly from prefix sums of the column
//! multiplicities, and the final-state stream is started at the matching rank.

use std::cmp::Ordering;

use crate::error::Result;
use crate::linalg::{log_add, log_sum_exp};
use crate::operators::{Factor, ValueClass, CLASS_CAP};
use crate::thermal::{dot, tie_break, Spectrum, ThermalState};

use super::{walk_float, Item, ProtocolOptions, Sink, MAX_SLOTS};

#[derive(Debug, Clone, Copy)]
struct Prepared {
    f: f64,
    ln_mult: f64,
    count: Option<u64>,
    values: [f64; MAX_SLOTS],
}

/// Classes whose marginal mass exceeds `e^{−nats}` under any of `thetas`.
fn boxed<'a>(classes: &'a [ValueClass], thetas: &[&[f64]], nats: f64) -> Vec<&'a ValueClass> {
    let mut keep = vec![false; classes.len()];
    for theta in thetas {
        let lw: Vec<f64> = classes.iter().map(|c| c.ln_mult - dot(theta, &c.values)).collect();
        let phi = log_sum_exp(lw.iter().copied());
        for (flag, l) in keep.iter_mut().zip(&lw) {
            *flag |= l - phi > -nats;
        }
    }
    classes.iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| c).collect()
}

fn prepare(classes: &[&ValueClass], theta: &[f64]) -> Vec<Prepared> {
    let mut out: Vec<Prepared> = classes
        .iter()
        .map(|c| {
            let mut values = [0.0; MAX_SLOTS];
            values[..c.values.len()].copy_from_slice(&c.values);
            Prepared { f: dot(theta, &c.values), ln_mult: c.ln_mult, count: c.count, values }
        })
        .collect();
    out.sort_by(|a, b| tie_break(a.f, &a.values, b.f, &b.values));
    out
}

/// Both factor lists sorted under one θ, with log prefix sums over the columns.
struct Lists {
    rows: Vec<Prepared>,
    cols: Vec<Prepared>,
    prefix: Vec<f64>,
}

impl Lists {
    fn new(rows: &[&ValueClass], cols: &[&ValueClass], theta: &[f64]) -> Self {
        let rows = prepare(rows, theta);
        let cols = prepare(cols, theta);
        let mut acc = f64::NEG_INFINITY;
        let prefix = cols
            .iter()
            .map(|c| {
                acc = log_add(acc, c.ln_mult);
                acc
            })
            .collect();
        Self { rows, cols, prefix }
    }

    fn first_at_or_above(&self, row: &Prepared, c: f64) -> usize {
        self.cols.partition_point(|col| row.f + col.f < c)
    }

    /// `ln #{states : f₁ + f₂ < c}` over the retained classes.
    fn ln_count_below(&self, c: f64) -> f64 {
        log_sum_exp(self.rows.iter().filter_map(|r| {
            let idx = self.first_at_or_above(r, c);
            (idx > 0).then(|| r.ln_mult + self.prefix[idx - 1])
        }))
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    f: f64,
    sum: f64,
    values: [f64; MAX_SLOTS],
    i: u32,
    j: u32,
}

fn entry_order(a: &Entry, b: &Entry) -> Ordering {
    a.f.total_cmp(&b.f)
        .then_with(|| a.sum.total_cmp(&b.sum))
        .then_with(|| {
            for (x, y) in a.values.iter().zip(&b.values) {
                match x.total_cmp(y) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            Ordering::Equal
        })
        .then_with(|| (a.i, a.j).cmp(&(b.i, b.j)))
}

/// Joint classes in ascending `θ·x`, produced chunk by chunk: every row advances
/// its column pointer up to the chunk edge and the chunk is sorted.
struct Stream<'a> {
    lists: &'a Lists,
    theta: &'a [f64],
    phi: f64,
    c_hi: f64,
    next_col: Vec<usize>,
    edge: f64,
    width: f64,
    target: usize,
    buf: Vec<Entry>,
    pos: usize,
    done: bool,
}

impl<'a> Stream<'a> {
    fn new(lists: &'a Lists, theta: &'a [f64], phi: f64, c_lo: f64, c_hi: f64, width: f64) -> Self {
        let next_col: Vec<usize> = lists.rows.iter().map(|r| lists.first_at_or_above(r, c_lo)).collect();
        let edge = if c_lo.is_finite() {
            c_lo
        } else {
            lists
                .rows
                .iter()
                .zip(&next_col)
                .filter_map(|(r, &j)| lists.cols.get(j).map(|c| r.f + c.f))
                .fold(f64::INFINITY, f64::min)
        };
        Self {
            lists,
            theta,
            phi,
            c_hi,
            next_col,
            edge,
            width: width.max(f64::MIN_POSITIVE),
            target: (4 * lists.rows.len()).max(4096),
            buf: Vec::new(),
            pos: 0,
            done: false,
        }
    }

    fn refill(&mut self) {
        self.buf.clear();
        self.pos = 0;
        while self.buf.is_empty() {
            if !(self.edge <= self.c_hi) || !self.edge.is_finite() {
                self.done = true;
                return;
            }
            let mut hi = self.edge + self.width;
            if hi <= self.edge {
                hi = self.edge + self.edge.abs() * f64::EPSILON * 4.0 + f64::MIN_POSITIVE;
            }
            let mut live = false;
            for (i, r) in self.lists.rows.iter().enumerate() {
                let mut j = self.next_col[i];
                while let Some(c) = self.lists.cols.get(j) {
                    let f = r.f + c.f;
                    if !(f < hi) {
                        break;
                    }
                    let values: [f64; MAX_SLOTS] = std::array::from_fn(|m| r.values[m] + c.values[m]);
                    let sum = values.iter().sum();
                    self.buf.push(Entry { f, sum, values, i: i as u32, j: j as u32 });
                    j += 1;
                }
                live |= j < self.lists.cols.len();
                self.next_col[i] = j;
            }
            self.edge = hi;
            let n = self.buf.len();
            if n < self.target / 4 {
                self.width *= 2.0;
            } else if n > self.target * 4 {
                self.width *= 0.5;
            }
            if !live && self.buf.is_empty() {
                self.done = true;
                return;
            }
        }
        self.buf.sort_unstable_by(entry_order);
    }
}

impl Iterator for Stream<'_> {
    type Item = Item;

    fn next(&mut self) -> Option<Item> {
        if self.done {
            return None;
        }
        if self.pos >= self.buf.len() {
            self.refill();
            if self.done {
                return None;
            }
        }
        let e = self.buf[self.pos];
        self.pos += 1;
        if e.f > self.c_hi {
            self.done = true;
            return None;
        }
        let r = &self.lists.rows[e.i as usize];
        let c = &self.lists.cols[e.j as usize];
        let k = self.theta.len();
        Some(Item {
            ln_p: -dot(self.theta, &e.values[..k]) - self.phi,
            ln_mult: r.ln_mult + c.ln_mult,
            count: r.count.zip(c.count).and_then(|(a, b)| a.checked_mul(b)),
            values: e.values,
            skip: false,
        })
    }
}

/// Mean and standard deviation of `θ·X` in a factored thermal state.
fn moments(state: &ThermalState) -> Option<(f64, f64)> {
    let Spectrum::Factored(parts) = &state.spectrum else { return None };
    let t = state.theta.as_slice();
    let k = t.len();
    let mut mean = 0.0;
    let mut var = 0.0;
    for p in parts {
        mean += dot(t, &p.eta);
        for a in 0..k {
            for b in 0..k {
                var += t[a] * p.cov[(a, b)] * t[b];
            }
        }
    }
    Some((mean, var.max(0.0).sqrt()))
}

/// Couple `τ_{θ₀}` to `τ_{θ_λ}` for a product of exactly two factors.
pub(crate) fn couple_two_factors(
    factors: &[Factor],
    state0: &ThermalState,
    state_lambda: &ThermalState,
    _eta0: &[f64],
    opts: &ProtocolOptions,
    sink: &mut Sink,
) -> Result<()> {
    let t0 = state0.theta.as_slice();
    let tl = state_lambda.theta.as_slice();
    let c1 = factors[0].classes(CLASS_CAP)?;
    let c2 = factors[1].classes(CLASS_CAP)?;
    let k1 = boxed(&c1, &[t0, tl], opts.box_nats);
    let k2 = boxed(&c2, &[t0, tl], opts.box_nats);
    let l0 = Lists::new(&k1, &k2, t0);
    let ll = Lists::new(&k1, &k2, tl);

    let (mean0, sd0) = moments(state0).unwrap_or((0.0, 0.0));
    let (c_lo, c_hi) = if sd0 > 0.0 {
        (mean0 - opts.window_z * sd0, mean0 + opts.window_z * sd0)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    let r0 = if c_lo.is_finite() { l0.ln_count_below(c_lo) } else { f64::NEG_INFINITY };

    // Largest final-order threshold whose count below stays within the initial offset.
    let start = if r0 == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        let (meanl, sdl) = moments(state_lambda).unwrap_or((0.0, 1.0));
        let step = sdl.max(1e-12 * (1.0 + meanl.abs()));
        let mut lo = meanl - (opts.window_z + 1.0) * sdl;
        let mut tries = 0;
        while ll.ln_count_below(lo) > r0 && tries < 10_000 {
            lo -= step * (1 << tries.min(20)) as f64;
            tries += 1;
        }
        let mut hi = lo + step;
        tries = 0;
        while ll.ln_count_below(hi) <= r0 && tries < 10_000 {
            lo = hi;
            hi += step;
            tries += 1;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if ll.ln_count_below(mid) <= r0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let rl = if start.is_finite() { ll.ln_count_below(start) } else { f64::NEG_INFINITY };

    let width0 = (sd0 / 64.0).max(1e-9);
    let a_stream = Stream::new(&l0, t0, state0.free_entropy, c_lo, c_hi, width0);
    let b_stream = Stream::new(&ll, tl, state_lambda.free_entropy, start, f64::INFINITY, width0);
    // Final-order states ranked between the two offsets face initial states below
    // the window; a massless placeholder consumes them.
    let gap = if r0 > rl { r0 + (-(rl - r0).exp_m1()).ln() } else { f64::NEG_INFINITY };
    let lead = (gap > f64::NEG_INFINITY).then_some(Item {
        ln_p: f64::NEG_INFINITY,
        ln_mult: gap,
        count: None,
        values: [0.0; MAX_SLOTS],
        skip: true,
    });
    walk_float(lead.into_iter().chain(a_stream), b_stream, sink)
}
