//! Registering named parameter tensors on a tape and collecting the
//! (name, node) pairs the optimizer needs to route gradients back.

use crate::tensor::{Node, Tape, Tensor};

/// Wraps a tape for one forward pass; `bind` registers a named parameter as
/// either a trainable leaf or a frozen constant.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    trainable: bool,
    bindings: Vec<(String, Node)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape, trainable: bool) -> Self {
        Binder { tape, trainable, bindings: Vec::new() }
    }

    pub fn bind(&mut self, name: String, tensor: &Tensor) -> Node {
        let node =
            if self.trainable { self.tape.param(tensor) } else { self.tape.constant(tensor) };
        if self.trainable {
            self.bindings.push((name, node));
        }
        node
    }

    /// (name, node) pairs bound so far, in bind order.
    pub fn bindings(&self) -> &[(String, Node)] {
        &self.bindings
    }

    pub fn into_bindings(self) -> Vec<(String, Node)> {
        self.bindings
    }
}

/// Aggregates flat (name, numel) pairs into per-component subtotals, keyed by
/// the first two dotted name segments.
pub fn group_counts(entries: &[(String, usize)]) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, count) in entries {
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, c)) => *c += count,
            None => groups.push((group, *count)),
        }
    }
    groups
}
