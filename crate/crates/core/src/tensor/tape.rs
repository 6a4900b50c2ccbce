use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{debug_check_finite, Element, Tensor};
use crate::error::{Error, Result};

/// Backward rule: receives the gradient of the op output and returns one
/// optional gradient per recorded input, in input order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Entry<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Vec<usize>,
    trainable: bool,
}

struct TapeCell<T> {
    entries: RefCell<Vec<Entry<T>>>,
}

/// Ordered record of operations. Entries are appended as ops execute, so
/// every entry's inputs precede it.
#[derive(Clone)]
pub struct Tape<T> {
    cell: Rc<TapeCell<T>>,
}

#[derive(Clone)]
struct NodeRef<T> {
    tape: Rc<TapeCell<T>>,
    id: usize,
}

/// A tensor value plus, when tracked, its node on a tape.
#[derive(Clone)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<NodeRef<T>>,
}

impl<T> fmt::Debug for Var<T>
where
    T: fmt::Debug,
{
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            cell: Rc::new(TapeCell {
                entries: RefCell::new(Vec::new()),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.cell.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, value: impl Into<Rc<Tensor<T>>>) -> Var<T> {
        self.push_leaf(value.into(), true)
    }

    /// Registers a tracked leaf that is not reported as trainable (its
    /// gradient is still available if reached).
    pub fn input(&self, value: impl Into<Rc<Tensor<T>>>) -> Var<T> {
        self.push_leaf(value.into(), false)
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, trainable: bool) -> Var<T> {
        let mut entries = self.cell.entries.borrow_mut();
        entries.push(Entry {
            inputs: Vec::new(),
            backward: None,
            shape: value.shape.clone(),
            trainable,
        });
        Var {
            node: Some(NodeRef {
                tape: self.cell.clone(),
                id: entries.len() - 1,
            }),
            value,
        }
    }
}

impl<T: Element> Var<T> {
    /// Untracked value: ops on constants record nothing.
    pub fn constant(value: impl Into<Rc<Tensor<T>>>) -> Self {
        Var {
            value: value.into(),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Self {
        Var::constant(self.value.clone())
    }

    /// Records the result of an op. When no input is tracked the backward
    /// rule is dropped and the result is a constant.
    pub(crate) fn from_op<F>(op: &str, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Result<Var<T>>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        debug_check_finite(op, &value);
        let mut tape: Option<&Rc<TapeCell<T>>> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) if Rc::ptr_eq(t, &n.tape) => {}
                    Some(_) => {
                        return Err(Error::Contract(format!(
                            "`{op}` mixes variables from different tapes"
                        )))
                    }
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var::constant(value));
        };
        let mut entries = tape.entries.borrow_mut();
        entries.push(Entry {
            inputs: inputs.iter().map(|v| v.node.as_ref().map(|n| n.id)).collect(),
            backward: Some(Box::new(backward)),
            shape: value.shape.clone(),
            trainable: false,
        });
        let id = entries.len() - 1;
        Ok(Var {
            value: Rc::new(value),
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        })
    }

    /// Reverse pass from a scalar. Visits each recorded entry up to this one
    /// exactly once, newest first.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let node = self
            .node
            .as_ref()
            .ok_or_else(|| Error::Contract("loss is not recorded on a tape".into()))?;
        let entries = node.tape.entries.borrow();
        let mut pending: Vec<Option<Tensor<T>>> = (0..=node.id).map(|_| None).collect();
        pending[node.id] = Some(Tensor::ones(self.shape()));
        let mut grads = HashMap::new();
        for id in (0..=node.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let entry = &entries[id];
            match &entry.backward {
                None => {
                    grads.insert(id, g);
                }
                Some(rule) => {
                    let input_grads = rule(&g);
                    debug_assert_eq!(input_grads.len(), entry.inputs.len());
                    for (input, ig) in entry.inputs.iter().zip(input_grads) {
                        if let (Some(i), Some(ig)) = (input, ig) {
                            accumulate(&mut pending[*i], ig, &entries[*i].shape);
                        }
                    }
                }
            }
        }
        for (id, e) in entries.iter().enumerate().take(node.id + 1) {
            if e.trainable && e.backward.is_none() {
                grads.entry(id).or_insert_with(|| Tensor::zeros(&e.shape));
            }
        }
        Ok(Gradients {
            tape: Rc::downgrade(&node.tape),
            grads,
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>, shape: &[usize]) {
    assert_eq!(g.shape(), shape, "gradient shape disagrees with its node");
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Gradients<T> {
    tape: std::rc::Weak<TapeCell<T>>,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, if it was reached (trainable leaves always are).
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        let node = var.node.as_ref()?;
        let same = self
            .tape
            .upgrade()
            .is_some_and(|t| Rc::ptr_eq(&t, &node.tape));
        if !same {
            return None;
        }
        self.grads.get(&node.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
