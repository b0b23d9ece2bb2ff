use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::descriptor::NetworkDescriptor;
use crate::error::{Error, Result};

/// Successor lists over layer indices (one entry per consumed edge).
fn successors(d: &NetworkDescriptor) -> Vec<Vec<usize>> {
    let producer: HashMap<&str, usize> =
        d.layers.iter().enumerate().map(|(i, l)| (l.output(), i)).collect();
    let mut succ = vec![Vec::new(); d.layers.len()];
    for (i, l) in d.layers.iter().enumerate() {
        for e in &l.inputs {
            if let Some(&p) = producer.get(e.as_str()) {
                succ[p].push(i);
            }
        }
    }
    succ
}

/// Kahn's algorithm; among ready layers the earliest declared goes first.
pub fn topo_order(d: &NetworkDescriptor) -> Result<Vec<usize>> {
    let succ = successors(d);
    let mut indegree = vec![0usize; d.layers.len()];
    for s in succ.iter().flatten() {
        indegree[*s] += 1;
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..d.layers.len()).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(d.layers.len());
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() == d.layers.len() {
        return Ok(order);
    }

    // Leftovers are cycle members plus anything downstream of a cycle; peel
    // off the downstream part by repeatedly dropping sinks.
    let mut alive: Vec<bool> = indegree.iter().map(|&d| d > 0).collect();
    loop {
        let sink = (0..alive.len()).find(|&i| alive[i] && !succ[i].iter().any(|&s| alive[s]));
        match sink {
            Some(i) => alive[i] = false,
            None => break,
        }
    }
    let names = (0..alive.len()).filter(|&i| alive[i]).map(|i| d.layers[i].name.clone()).collect();
    Err(Error::Cycle(names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_descriptor;

    fn names(d: &NetworkDescriptor, order: &[usize]) -> Vec<String> {
        order.iter().map(|&i| d.layers[i].name.clone()).collect()
    }

    #[test]
    fn chain_keeps_declaration_order() {
        let d = parse_descriptor(
            "layer in input shape=4 out=x\nlayer a relu in=x out=a\nlayer b relu in=a out=b\nlayer c relu in=b out=c\n",
        )
        .unwrap();
        assert_eq!(names(&d, &topo_order(&d).unwrap()), ["in", "a", "b", "c"]);
    }

    #[test]
    fn single_input_layer() {
        let d = parse_descriptor("layer in input shape=4 out=x\n").unwrap();
        assert_eq!(topo_order(&d).unwrap(), vec![0]);
    }

    #[test]
    fn declared_out_of_order() {
        let d = parse_descriptor("layer b relu in=a out=b\nlayer a relu in=x out=a\nlayer in input shape=4 out=x\n").unwrap();
        assert_eq!(names(&d, &topo_order(&d).unwrap()), ["in", "a", "b"]);
    }

    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn diamond_order_is_a_valid_topological_order() {
        let d = parse_descriptor(
            "layer m sum in=a,b out=m\nlayer a relu in=x out=a\nlayer b relu in=x out=b\nlayer in input shape=4 out=x\n",
        )
        .unwrap();
        // Oracle: enumerate every permutation, keep those respecting all edges.
        let edges = [(3usize, 1usize), (3, 2), (1, 0), (2, 0)];
        let valid: Vec<Vec<usize>> = permutations(&[0, 1, 2, 3])
            .into_iter()
            .filter(|p| {
                let pos = |v: usize| p.iter().position(|&x| x == v).unwrap();
                edges.iter().all(|&(u, v)| pos(u) < pos(v))
            })
            .collect();
        assert_eq!(valid.len(), 2);
        let got = topo_order(&d).unwrap();
        assert!(valid.contains(&got));
        assert_eq!(names(&d, &got), ["in", "a", "b", "m"]);
    }
}
