//! Continuous-time bipartite graph: storage, strictly-before-`t` neighbor queries,
//! deterministic neighbor sampling and the chronological train/valid/test split.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One timestamped user-item event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: f64,
}

impl Interaction {
    pub fn new(user: usize, item: usize, timestamp: f64) -> Self {
        Interaction {
            user,
            item,
            timestamp,
        }
    }
}

/// A node of the bipartite graph. Users and items live in separate index spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    User(usize),
    Item(usize),
}

impl NodeRef {
    pub fn index(self) -> usize {
        match self {
            NodeRef::User(i) | NodeRef::Item(i) => i,
        }
    }

    pub fn is_user(self) -> bool {
        matches!(self, NodeRef::User(_))
    }

    /// The node on the other side of an edge with counterpart index `id`.
    pub fn counterpart(self, id: usize) -> NodeRef {
        match self {
            NodeRef::User(_) => NodeRef::Item(id),
            NodeRef::Item(_) => NodeRef::User(id),
        }
    }
}

/// Adjacency entry: the node on the other side of the edge and the edge time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub timestamp: f64,
}

/// Immutable time-indexed bipartite adjacency.
#[derive(Clone, Debug)]
pub struct Ctbg {
    num_users: usize,
    num_items: usize,
    user_adjacency: Vec<Vec<Neighbor>>,
    item_adjacency: Vec<Vec<Neighbor>>,
    num_edges: usize,
}

fn check_interaction(x: &Interaction, num_users: usize, num_items: usize) -> Result<()> {
    if x.user >= num_users {
        return Err(Error::IdOutOfRange {
            kind: "user",
            id: x.user,
            count: num_users,
        });
    }
    if x.item >= num_items {
        return Err(Error::IdOutOfRange {
            kind: "item",
            id: x.item,
            count: num_items,
        });
    }
    if !x.timestamp.is_finite() || x.timestamp < 0.0 {
        return Err(Error::InvalidTimestamp(x.timestamp));
    }
    Ok(())
}

impl Ctbg {
    /// Builds the graph over declared node counts. Duplicate triplets are kept as
    /// distinct edges; equal timestamps keep their input order.
    pub fn build(interactions: &[Interaction], num_users: usize, num_items: usize) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut user_adjacency = vec![Vec::new(); num_users];
        let mut item_adjacency = vec![Vec::new(); num_items];
        for x in interactions {
            check_interaction(x, num_users, num_items)?;
            user_adjacency[x.user].push(Neighbor {
                id: x.item,
                timestamp: x.timestamp,
            });
            item_adjacency[x.item].push(Neighbor {
                id: x.user,
                timestamp: x.timestamp,
            });
        }
        // sort_by is stable, so ties keep insertion order.
        for list in user_adjacency.iter_mut().chain(item_adjacency.iter_mut()) {
            list.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
        Ok(Ctbg {
            num_users,
            num_items,
            user_adjacency,
            item_adjacency,
            num_edges: interactions.len(),
        })
    }

    /// Builds the graph with node counts inferred as `max id + 1`.
    pub fn from_interactions(interactions: &[Interaction]) -> Result<Self> {
        let num_users = interactions.iter().map(|x| x.user + 1).max().unwrap_or(0);
        let num_items = interactions.iter().map(|x| x.item + 1).max().unwrap_or(0);
        Ctbg::build(interactions, num_users, num_items)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn contains(&self, node: NodeRef) -> bool {
        match node {
            NodeRef::User(u) => u < self.num_users,
            NodeRef::Item(i) => i < self.num_items,
        }
    }

    /// Full time-sorted adjacency of `node`.
    pub fn adjacency(&self, node: NodeRef) -> Result<&[Neighbor]> {
        match node {
            NodeRef::User(u) if u < self.num_users => Ok(&self.user_adjacency[u]),
            NodeRef::Item(i) if i < self.num_items => Ok(&self.item_adjacency[i]),
            _ => Err(Error::UnknownNode(node)),
        }
    }

    /// Edges of `node` with timestamp strictly less than `t`, time-sorted.
    pub fn neighbors_before(&self, node: NodeRef, t: f64) -> Result<&[Neighbor]> {
        let adj = self.adjacency(node)?;
        let end = adj.partition_point(|n| n.timestamp < t);
        Ok(&adj[..end])
    }

    /// Samples `s` neighbors from the pre-`t` pool; see [`sample_pool_indices`].
    pub fn sample_neighbors(&self, node: NodeRef, t: f64, s: usize, seed: u64) -> Result<Vec<Neighbor>> {
        let pool = self.neighbors_before(node, t)?;
        Ok(sample_pool_indices(pool.len(), s, seed)
            .into_iter()
            .map(|k| pool[k])
            .collect())
    }

    /// All edges, flattened from the user side in user order.
    pub fn edges(&self) -> Vec<Interaction> {
        self.user_adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, adj)| adj.iter().map(move |n| Interaction::new(u, n.id, n.timestamp)))
            .collect()
    }
}

/// Indices into a time-sorted pool of length `pool_len`, returned in ascending order.
///
/// With `pool_len >= s` this is a uniform `s`-subset without replacement. With
/// `0 < pool_len < s` every pool element is kept once and the remaining slots are
/// filled by uniform draws with replacement, so callers always see `s` entries.
/// An empty pool yields an empty list.
pub fn sample_pool_indices(pool_len: usize, s: usize, seed: u64) -> Vec<usize> {
    if pool_len == 0 || s == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if pool_len >= s {
        index::sample(&mut rng, pool_len, s).into_vec()
    } else {
        let mut all: Vec<usize> = (0..pool_len).collect();
        all.extend((pool_len..s).map(|_| rng.gen_range(0..pool_len)));
        all
    };
    picked.sort_unstable();
    picked
}

/// SplitMix64 finalizer folded over `parts`; used to derive per-query seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Chronological partition of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Last train timestamp and last valid timestamp.
    pub boundary_times: (f64, f64),
}

impl SplitDataset {
    pub fn all(&self) -> Vec<Interaction> {
        let mut all = Vec::with_capacity(self.train.len() + self.valid.len() + self.test.len());
        all.extend_from_slice(&self.train);
        all.extend_from_slice(&self.valid);
        all.extend_from_slice(&self.test);
        all
    }
}

/// Sorts by timestamp (stable) and cuts into `⌊r₀N⌋ / ⌊r₁N⌋ / remainder`.
pub fn chronological_split(interactions: &[Interaction], ratios: [f64; 3]) -> Result<SplitDataset> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(ratios));
    }
    let n = interactions.len();
    if n < 3 {
        return Err(Error::TooFewInteractions { needed: 3, got: n });
    }
    let mut sorted = interactions.to_vec();
    sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let n_train = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let n_valid = ((ratios[1] * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    let test = sorted.split_off(n_train + n_valid);
    let valid = sorted.split_off(n_train);
    let train = sorted;
    let t_train_end = train.last().map_or(0.0, |x| x.timestamp);
    let t_valid_end = valid.last().map_or(t_train_end, |x| x.timestamp);
    Ok(SplitDataset {
        train,
        valid,
        test,
        boundary_times: (t_train_end, t_valid_end),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ix(u: usize, i: usize, t: f64) -> Interaction {
        Interaction::new(u, i, t)
    }

    #[test]
    fn single_edge() {
        let g = Ctbg::build(&[ix(0, 0, 1.0)], 1, 1).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.adjacency(NodeRef::User(0)).unwrap(), &[Neighbor { id: 0, timestamp: 1.0 }]);
    }

    #[test]
    fn adjacency_sorted_by_time() {
        let g = Ctbg::build(&[ix(0, 0, 3.0), ix(0, 1, 1.0)], 1, 2).unwrap();
        let adj: Vec<_> = g.adjacency(NodeRef::User(0)).unwrap().iter().map(|n| (n.id, n.timestamp)).collect();
        assert_eq!(adj, vec![(1, 1.0), (0, 3.0)]);
    }

    #[test]
    fn ties_keep_input_order() {
        let g = Ctbg::build(&[ix(0, 2, 1.0), ix(0, 0, 1.0), ix(0, 1, 1.0)], 1, 3).unwrap();
        let ids: Vec<_> = g.adjacency(NodeRef::User(0)).unwrap().iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![2, 0, 1]);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(Ctbg::build(&[], 1, 1), Err(Error::EmptyInput)));
        assert!(matches!(
            Ctbg::build(&[ix(2, 0, 1.0)], 2, 1),
            Err(Error::IdOutOfRange { kind: "user", .. })
        ));
        assert!(matches!(
            Ctbg::build(&[ix(0, 5, 1.0)], 1, 5),
            Err(Error::IdOutOfRange { kind: "item", .. })
        ));
        assert!(matches!(Ctbg::build(&[ix(0, 0, -1.0)], 1, 1), Err(Error::InvalidTimestamp(_))));
        assert!(matches!(Ctbg::build(&[ix(0, 0, f64::NAN)], 1, 1), Err(Error::InvalidTimestamp(_))));
    }

    #[test]
    fn duplicate_triplets_are_distinct_edges() {
        let g = Ctbg::build(&[ix(0, 0, 1.0), ix(0, 0, 1.0)], 1, 1).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.adjacency(NodeRef::Item(0)).unwrap().len(), 2);
    }

    #[test]
    fn neighbors_before_is_strict() {
        let g = Ctbg::build(&[ix(0, 0, 1.0), ix(0, 1, 3.0)], 1, 2).unwrap();
        assert_eq!(
            g.neighbors_before(NodeRef::User(0), 3.0).unwrap(),
            &[Neighbor { id: 0, timestamp: 1.0 }]
        );
        assert!(g.neighbors_before(NodeRef::User(0), 0.5).unwrap().is_empty());
        assert_eq!(
            g.neighbors_before(NodeRef::Item(0), 2.0).unwrap(),
            &[Neighbor { id: 0, timestamp: 1.0 }]
        );
        assert!(matches!(
            g.neighbors_before(NodeRef::User(3), 1.0),
            Err(Error::UnknownNode(NodeRef::User(3)))
        ));
    }

    #[test]
    fn degenerate_pool_is_padded() {
        let g = Ctbg::build(&[ix(0, 4, 1.0)], 1, 5).unwrap();
        let s = g.sample_neighbors(NodeRef::User(0), 2.0, 5, 7).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|n| n.id == 4 && n.timestamp == 1.0));
        assert!(g.sample_neighbors(NodeRef::User(0), 0.5, 5, 7).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let xs: Vec<_> = (0..20).map(|k| ix(0, k, k as f64)).collect();
        let g = Ctbg::from_interactions(&xs).unwrap();
        let a = g.sample_neighbors(NodeRef::User(0), 15.0, 4, 99).unwrap();
        let b = g.sample_neighbors(NodeRef::User(0), 15.0, 4, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_is_a_subset_of_the_pool() {
        let g = Ctbg::build(&[ix(0, 0, 1.0), ix(0, 1, 2.0), ix(0, 2, 3.0), ix(0, 3, 9.0)], 1, 4).unwrap();
        let pool: Vec<(usize, u64)> = vec![(0, 1.0f64.to_bits()), (1, 2.0f64.to_bits()), (2, 3.0f64.to_bits())];
        // every 2-subset of the pool, enumerated
        let mut subsets = BTreeSet::new();
        for a in 0..pool.len() {
            for b in a + 1..pool.len() {
                subsets.insert(vec![pool[a], pool[b]]);
            }
        }
        for seed in 0..50 {
            let s = g.sample_neighbors(NodeRef::User(0), 5.0, 2, seed).unwrap();
            let key: Vec<_> = s.iter().map(|n| (n.id, n.timestamp.to_bits())).collect();
            assert!(subsets.contains(&key), "{key:?} not a 2-subset of the pool");
        }
    }

    #[test]
    fn split_exact_ratios() {
        let xs: Vec<_> = (1..=10).map(|k| ix(0, k - 1, k as f64)).collect();
        let s = chronological_split(&xs, [0.8, 0.1, 0.1]).unwrap();
        let ts = |v: &[Interaction]| v.iter().map(|x| x.timestamp).collect::<Vec<_>>();
        assert_eq!(ts(&s.train), (1..=8).map(|k| k as f64).collect::<Vec<_>>());
        assert_eq!(ts(&s.valid), vec![9.0]);
        assert_eq!(ts(&s.test), vec![10.0]);
        assert_eq!(s.boundary_times, (8.0, 9.0));
    }

    #[test]
    fn split_floor_behaviour() {
        let xs: Vec<_> = (0..5).map(|k| ix(0, k, k as f64)).collect();
        let s = chronological_split(&xs, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (4, 0, 1));
    }

    #[test]
    fn split_of_shuffled_input_matches_sorted() {
        use rand::seq::SliceRandom;
        let sorted: Vec<_> = (1..=10).map(|k| ix(k % 3, k, k as f64)).collect();
        let mut shuffled = sorted.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        // oracle: sort first, then cut by counts
        let expected = chronological_split(&sorted, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(chronological_split(&shuffled, [0.8, 0.1, 0.1]).unwrap(), expected);
    }

    #[test]
    fn split_errors() {
        let xs = vec![ix(0, 0, 1.0), ix(0, 1, 2.0)];
        assert!(matches!(
            chronological_split(&xs, [0.8, 0.1, 0.1]),
            Err(Error::TooFewInteractions { .. })
        ));
        let xs = vec![ix(0, 0, 1.0); 5];
        assert!(matches!(chronological_split(&xs, [0.8, 0.3, 0.1]), Err(Error::InvalidRatios(_))));
    }

    fn arb_interactions() -> impl Strategy<Value = Vec<Interaction>> {
        prop::collection::vec((0usize..6, 0usize..8, 0u32..50), 1..60)
            .prop_map(|v| v.into_iter().map(|(u, i, t)| ix(u, i, t as f64)).collect())
    }

    fn key(x: &Interaction) -> (usize, usize, u64) {
        (x.user, x.item, x.timestamp.to_bits())
    }

    proptest! {
        #[test]
        fn samples_precede_query_time(xs in arb_interactions(), t in 0.0f64..55.0, s in 1usize..6, seed: u64) {
            let g = Ctbg::build(&xs, 6, 8).unwrap();
            for u in 0..6 {
                for n in g.sample_neighbors(NodeRef::User(u), t, s, seed).unwrap() {
                    prop_assert!(n.timestamp < t);
                }
            }
        }

        #[test]
        fn future_edges_do_not_change_samples(
            xs in arb_interactions(),
            extra in prop::collection::vec((0usize..6, 0usize..8, 0u32..20), 1..10),
            t in 0u32..50, s in 1usize..6, seed: u64,
        ) {
            let t = t as f64;
            let before = Ctbg::build(&xs, 6, 8).unwrap();
            let mut more = xs.clone();
            more.extend(extra.into_iter().map(|(u, i, dt)| ix(u, i, t + dt as f64)));
            let after = Ctbg::build(&more, 6, 8).unwrap();
            for node in (0..6).map(NodeRef::User).chain((0..8).map(NodeRef::Item)) {
                prop_assert_eq!(before.neighbors_before(node, t).unwrap(), after.neighbors_before(node, t).unwrap());
                prop_assert_eq!(
                    before.sample_neighbors(node, t, s, seed).unwrap(),
                    after.sample_neighbors(node, t, s, seed).unwrap()
                );
            }
        }

        #[test]
        fn flattening_recovers_the_multiset(xs in arb_interactions()) {
            let g = Ctbg::build(&xs, 6, 8).unwrap();
            let mut got: Vec<_> = g.edges().iter().map(key).collect();
            let mut want: Vec<_> = xs.iter().map(key).collect();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
            let item_side: usize = (0..8).map(|i| g.adjacency(NodeRef::Item(i)).unwrap().len()).sum();
            prop_assert_eq!(item_side, xs.len());
        }

        #[test]
        fn split_is_time_sorted_partition(xs in prop::collection::vec((0usize..6, 0usize..8, 0u32..50), 3..80)) {
            let xs: Vec<_> = xs.into_iter().map(|(u, i, t)| ix(u, i, t as f64)).collect();
            let s = chronological_split(&xs, [0.8, 0.1, 0.1]).unwrap();
            let all = s.all();
            prop_assert_eq!(all.len(), xs.len());
            prop_assert!(all.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            prop_assert_eq!(s.train.len(), (0.8 * xs.len() as f64 + 1e-9).floor() as usize);
        }
    }
}
