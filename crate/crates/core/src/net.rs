//! Neighbor topology and a bulk-synchronous in-memory message bus.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many agents each agent listens to, itself included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NeighborhoodSize {
    Count(usize),
    #[serde(with = "all_literal")]
    All,
}

mod all_literal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let v = String::deserialize(d)?;
        if v == "all" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected \"all\" or a count, got {v:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub m: usize,
    /// `N_i`: self first, then neighbors by increasing initial distance.
    pub neighbor_sets: Vec<Vec<usize>>,
    /// `P_i = { j : i in N_j }`, ascending.
    pub deemed_sets: Vec<Vec<usize>>,
}

impl Topology {
    /// Position of agent `j` inside `N_i`.
    pub fn block_of(&self, i: usize, j: usize) -> Option<usize> {
        self.neighbor_sets[i].iter().position(|&v| v == j)
    }

    pub fn from_neighbor_sets(neighbor_sets: Vec<Vec<usize>>) -> Result<Self> {
        let m = neighbor_sets.len();
        let mut deemed_sets = vec![Vec::new(); m];
        for (i, set) in neighbor_sets.iter().enumerate() {
            if set.first() != Some(&i) {
                return Err(Error::Config(format!(
                    "neighbor set of agent {i} must start with itself"
                )));
            }
            for &j in set {
                if j >= m {
                    return Err(Error::Config(format!("agent {i} lists unknown neighbor {j}")));
                }
                if deemed_sets[j].contains(&i) {
                    return Err(Error::Config(format!("agent {i} lists neighbor {j} twice")));
                }
                deemed_sets[j].push(i);
            }
        }
        for d in &mut deemed_sets {
            d.sort_unstable();
        }
        Ok(Self {
            m,
            neighbor_sets,
            deemed_sets,
        })
    }
}

/// Nearest-neighbor sets from initial positions, ties broken by lower id.
pub fn build_topology(positions: &[Vector2<f64>], size: NeighborhoodSize) -> Result<Topology> {
    let m = positions.len();
    let size = match size {
        NeighborhoodSize::All => m,
        NeighborhoodSize::Count(c) => c,
    };
    if size == 0 || size > m {
        return Err(Error::Config(format!("neighborhood size {size} not in 1..={m}")));
    }
    let mut sets = Vec::with_capacity(m);
    for i in 0..m {
        let mut others: Vec<(f64, usize)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| ((positions[j] - positions[i]).norm(), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut set = vec![i];
        set.extend(others.iter().take(size - 1).map(|&(_, j)| j));
        sets.push(set);
    }
    Topology::from_neighbor_sets(sets)
}

/// Agent `from`'s safe copy of agent `about`, plus the duals the global average needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyMessage {
    pub about: usize,
    pub from: usize,
    pub state_copy: Vec<Vector3<f64>>,
    pub time_copy: f64,
    pub dual_y: Vec<Vector3<f64>>,
    pub dual_eta: f64,
    /// Sender's consensus penalties.
    pub mu: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMessage {
    pub about: usize,
    pub z: Vec<Vector3<f64>>,
    pub s: f64,
}

/// 64-bit FNV-1a over the bit patterns of a float sequence.
pub fn digest<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl CopyMessage {
    fn digest(&self) -> u64 {
        let vals: Vec<f64> = self
            .state_copy
            .iter()
            .chain(&self.dual_y)
            .flat_map(|v| [v.x, v.y, v.z])
            .chain([self.time_copy, self.dual_eta, self.mu, self.gamma])
            .collect();
        digest(&vals)
    }
}

impl GlobalMessage {
    fn digest(&self) -> u64 {
        let vals: Vec<f64> = self.z.iter().flat_map(|v| [v.x, v.y, v.z]).chain([self.s]).collect();
        digest(&vals)
    }
}

/// Round-synchronous exchange. Posts for a round are all collected before
/// anything is delivered, so no agent sees a partial round.
#[derive(Debug, Clone)]
pub struct MessageBus {
    topology: Topology,
    trace: Option<Vec<String>>,
}

impl MessageBus {
    pub fn new(topology: Topology) -> Self {
        Self { topology, trace: None }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// One line per delivered message: `round,kind,sender,receiver,digest`.
    pub fn trace(&self) -> Option<&[String]> {
        self.trace.as_deref()
    }

    /// Delivers copies about `i` to agent `i` from every `j` in `P_i`, sorted by sender.
    pub fn exchange_copies(
        &mut self,
        round: usize,
        outgoing: Vec<Option<Vec<CopyMessage>>>,
    ) -> Result<Vec<Vec<CopyMessage>>> {
        let m = self.topology.m;
        if outgoing.len() != m {
            return Err(Error::LengthMismatch {
                what: "copy posts",
                expected: m,
                got: outgoing.len(),
            });
        }
        let mut inbox: Vec<Vec<CopyMessage>> = vec![Vec::new(); m];
        for (j, post) in outgoing.into_iter().enumerate() {
            let msgs = post.ok_or(Error::Synchronization { round, agent: j })?;
            if msgs.len() != self.topology.neighbor_sets[j].len() {
                return Err(Error::Synchronization { round, agent: j });
            }
            for msg in msgs {
                if msg.from != j || !self.topology.neighbor_sets[j].contains(&msg.about) {
                    return Err(Error::Synchronization { round, agent: j });
                }
                inbox[msg.about].push(msg);
            }
        }
        for (i, msgs) in inbox.iter_mut().enumerate() {
            msgs.sort_by_key(|c| c.from);
            let senders: Vec<usize> = msgs.iter().map(|c| c.from).collect();
            if senders != self.topology.deemed_sets[i] {
                let missing = self.topology.deemed_sets[i]
                    .iter()
                    .find(|j| !senders.contains(j))
                    .copied()
                    .unwrap_or(i);
                return Err(Error::Synchronization { round, agent: missing });
            }
        }
        if let Some(trace) = &mut self.trace {
            for msgs in &inbox {
                for c in msgs {
                    trace.push(format!("{round},copy,{},{},{:016x}", c.from, c.about, c.digest()));
                }
            }
        }
        Ok(inbox)
    }

    /// Delivers each agent's global to every agent that lists it, sorted by sender.
    pub fn exchange_globals(
        &mut self,
        round: usize,
        outgoing: Vec<Option<GlobalMessage>>,
    ) -> Result<Vec<Vec<GlobalMessage>>> {
        let m = self.topology.m;
        if outgoing.len() != m {
            return Err(Error::LengthMismatch {
                what: "global posts",
                expected: m,
                got: outgoing.len(),
            });
        }
        let mut posted = Vec::with_capacity(m);
        for (i, post) in outgoing.into_iter().enumerate() {
            let msg = post.ok_or(Error::Synchronization { round, agent: i })?;
            if msg.about != i {
                return Err(Error::Synchronization { round, agent: i });
            }
            posted.push(msg);
        }
        let mut inbox: Vec<Vec<GlobalMessage>> = Vec::with_capacity(m);
        for i in 0..m {
            let mut senders = self.topology.neighbor_sets[i].clone();
            senders.sort_unstable();
            inbox.push(senders.into_iter().map(|j| posted[j].clone()).collect());
        }
        if let Some(trace) = &mut self.trace {
            for (i, msgs) in inbox.iter().enumerate() {
                for g in msgs {
                    trace.push(format!("{round},global,{},{},{:016x}", g.about, i, g.digest()));
                }
            }
        }
        Ok(inbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Vec<Vector2<f64>> {
        (0..n).map(|i| Vector2::new(10.0 * i as f64, 0.0)).collect()
    }

    #[test]
    fn complete_sets() {
        let t = build_topology(&line(4), NeighborhoodSize::All).unwrap();
        for i in 0..4 {
            assert_eq!(t.neighbor_sets[i].len(), 4);
            assert_eq!(t.neighbor_sets[i][0], i);
            assert_eq!(t.deemed_sets[i], vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn middle_of_line() {
        let t = build_topology(&line(5), NeighborhoodSize::Count(3)).unwrap();
        // agent 2 has equidistant neighbors 1 and 3; lower id first
        assert_eq!(t.neighbor_sets[2], vec![2, 1, 3]);
        assert_eq!(t.neighbor_sets[0], vec![0, 1, 2]);
    }

    #[test]
    fn oversized_neighborhood_rejected() {
        assert!(build_topology(&line(3), NeighborhoodSize::Count(4)).is_err());
    }

    #[test]
    fn size_parses_from_toml() {
        #[derive(Deserialize)]
        struct W {
            n: NeighborhoodSize,
        }
        let a: W = toml::from_str("n = \"all\"").unwrap();
        assert_eq!(a.n, NeighborhoodSize::All);
        let b: W = toml::from_str("n = 3").unwrap();
        assert_eq!(b.n, NeighborhoodSize::Count(3));
        assert!(toml::from_str::<W>("n = \"most\"").is_err());
    }

    fn copy(from: usize, about: usize) -> CopyMessage {
        CopyMessage {
            about,
            from,
            state_copy: vec![Vector3::new(from as f64, about as f64, 0.0)],
            time_copy: 9.0,
            dual_y: vec![Vector3::zeros()],
            dual_eta: 0.0,
            mu: 1.0,
            gamma: 1.0,
        }
    }

    #[test]
    fn missing_poster_is_named() {
        let t = build_topology(&line(3), NeighborhoodSize::All).unwrap();
        let mut bus = MessageBus::new(t.clone());
        let mut posts: Vec<Option<Vec<CopyMessage>>> = (0..3)
            .map(|j| Some(t.neighbor_sets[j].iter().map(|&i| copy(j, i)).collect()))
            .collect();
        posts[1] = None;
        assert_eq!(
            bus.exchange_copies(7, posts),
            Err(Error::Synchronization { round: 7, agent: 1 })
        );
    }

    #[test]
    fn digest_is_bit_sensitive() {
        assert_ne!(digest(&[0.0]), digest(&[-0.0]));
        assert_eq!(digest(&[1.5, 2.0]), digest(&[1.5, 2.0]));
    }
}
