//! Named parameter trees: the common surface used by the optimizer, the
//! checkpoint codec and the gradient checker.

use sha2::{Digest, Sha256};

/// A tree of named f64 tensors, traversed in a fixed order.
///
/// Gradients share the parameter type, so an optimizer can walk a parameter
/// tree and its gradient tree in lockstep.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "flat vector length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x = value));
    }

    fn get_coord(&self, index: usize) -> f64 {
        let mut off = 0;
        let mut found = None;
        self.visit("", &mut |_, _, v| {
            if found.is_none() && index < off + v.len() {
                found = Some(v[index - off]);
            }
            off += v.len();
        });
        found.expect("coordinate out of range")
    }

    fn set_coord(&mut self, index: usize, value: f64) {
        let mut off = 0;
        let mut done = false;
        self.visit_mut("", &mut |_, v| {
            if !done && index < off + v.len() {
                v[index - off] = value;
                done = true;
            }
            off += v.len();
        });
        assert!(done, "coordinate out of range");
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, shape, v| {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in shape {
                h.update((*d as u32).to_le_bytes());
            }
            for x in v {
                h.update(x.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P: Parameters> Parameters for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [f64])) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
