//! Shortest-action distance to task completion.
//!
//! Distances are computed over abstract nodes `(page, focus, field
//! contents)` connected by every candidate action except `goback`, `wait`
//! and `finished`. A `goback` only helps before any forward move (going
//! back later returns to a page already on the path), so the distance of a
//! full state with back stack `s` is
//! `min_j ( j + static_distance(node after j pops) )`.

use std::collections::{HashMap, VecDeque};

use super::{candidates_for, observe, transition, ElementId, EnvState, FieldMap, PageId, Task};
use crate::action::{Action, ActionType};

/// Number of actions to reach a successful `finished`; `None` if the goal
/// is unreachable (e.g. after a wrong `finished`).
pub type Distance = Option<u32>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Node {
    page: PageId,
    focus: Option<ElementId>,
    fields: Vec<((PageId, ElementId), String)>,
}

impl Node {
    fn of(state: &EnvState) -> Self {
        Node {
            page: state.page,
            focus: state.focus,
            fields: state.fields.iter().map(|(k, v)| (*k, v.clone())).collect(),
        }
    }

    fn state(&self) -> EnvState {
        EnvState {
            page: self.page,
            fields: self.fields.iter().cloned().collect::<FieldMap>(),
            focus: self.focus,
            back_stack: Vec::new(),
            visited: Vec::new(),
            steps: 0,
            max_steps: u32::MAX,
            terminal: false,
            final_answer: None,
        }
    }
}

fn is_forward(a: &Action) -> bool {
    !matches!(
        a.action_type,
        ActionType::GoBack | ActionType::Wait | ActionType::Finished
    )
}

/// Successor nodes under forward actions, and whether some `finished`
/// candidate completes the goal from this node.
fn expand(task: &Task, node: &Node) -> (Vec<Node>, bool) {
    let state = node.state();
    let obs = observe(task, &state);
    let mut succ = Vec::new();
    let mut can_finish = false;
    for a in candidates_for(&task.vocabulary, &obs) {
        if a.action_type == ActionType::Finished {
            can_finish |= transition(task, &state, &a).goal_reached(task);
        } else if is_forward(&a) {
            let n = Node::of(&transition(task, &state, &a));
            if n != *node {
                succ.push(n);
            }
        }
    }
    (succ, can_finish)
}

#[derive(Debug, Clone)]
pub struct Planner {
    task_id: String,
    table: HashMap<Node, u32>,
}

impl Planner {
    /// Builds the static distance table over all nodes reachable from the
    /// start page.
    pub fn new(task: &Task) -> Self {
        let start = Node::of(&EnvState::initial(task, 1));
        let mut ids: HashMap<Node, usize> = HashMap::from([(start.clone(), 0)]);
        let mut nodes = vec![start];
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new()];
        let mut finishers = Vec::new();
        let mut i = 0;
        while i < nodes.len() {
            let (succ, can_finish) = expand(task, &nodes[i]);
            if can_finish {
                finishers.push(i);
            }
            for n in succ {
                let j = *ids.entry(n.clone()).or_insert_with(|| {
                    nodes.push(n);
                    reverse.push(Vec::new());
                    nodes.len() - 1
                });
                reverse[j].push(i);
            }
            i += 1;
        }

        let mut dist: Vec<Option<u32>> = vec![None; nodes.len()];
        let mut queue = VecDeque::new();
        for &f in &finishers {
            dist[f] = Some(1);
            queue.push_back(f);
        }
        while let Some(j) = queue.pop_front() {
            let d = dist[j].unwrap();
            for &p in &reverse[j] {
                if dist[p].is_none() {
                    dist[p] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }
        let table = nodes
            .into_iter()
            .zip(dist)
            .filter_map(|(n, d)| d.map(|d| (n, d)))
            .collect();
        Planner {
            task_id: task.task_id.clone(),
            table,
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    fn static_distance(&self, task: &Task, node: &Node) -> Distance {
        if let Some(&d) = self.table.get(node) {
            return Some(d);
        }
        // Nodes outside the table were either proven unreachable from the
        // goal or never reached from the start (arbitrary typed text, odd
        // focus). Fall back to a forward search.
        let mut best: Distance = None;
        let mut seen: HashMap<Node, u32> = HashMap::from([(node.clone(), 0)]);
        let mut queue = VecDeque::from([node.clone()]);
        while let Some(n) = queue.pop_front() {
            let d = seen[&n];
            if best.is_some_and(|b| d + 1 >= b) {
                break;
            }
            let reach = match self.table.get(&n) {
                Some(&t) => Some(d + t),
                None => {
                    let (succ, can_finish) = expand(task, &n);
                    for s in succ {
                        if !seen.contains_key(&s) {
                            seen.insert(s.clone(), d + 1);
                            queue.push_back(s);
                        }
                    }
                    can_finish.then_some(d + 1)
                }
            };
            if let Some(r) = reach {
                best = Some(best.map_or(r, |b| b.min(r)));
            }
        }
        best
    }

    /// Shortest number of actions from `state` to a successful finish,
    /// ignoring the step budget.
    pub fn distance(&self, task: &Task, state: &EnvState) -> Distance {
        debug_assert_eq!(task.task_id, self.task_id);
        if state.terminal {
            return state.goal_reached(task).then_some(0);
        }
        let mut best = self.static_distance(task, &Node::of(state));
        let mut node = Node::of(state);
        for (j, &page) in state.back_stack.iter().rev().enumerate() {
            node.page = page;
            node.focus = None;
            if let Some(d) = self.static_distance(task, &node) {
                let total = d + j as u32 + 1;
                best = Some(best.map_or(total, |b| b.min(total)));
            }
        }
        best
    }

    /// A minimal action sequence, choosing the first candidate in
    /// enumeration order at every step.
    pub fn shortest_path(&self, task: &Task, state: &EnvState) -> Option<Vec<Action>> {
        let mut d = self.distance(task, state)?;
        let mut state = state.clone();
        let mut path = Vec::with_capacity(d as usize);
        while d > 0 {
            let obs = observe(task, &state);
            let next = candidates_for(&task.vocabulary, &obs)
                .into_iter()
                .map(|a| {
                    let s = transition(task, &state, &a);
                    (a, s)
                })
                .find(|(_, s)| self.distance(task, s) == Some(d - 1))?;
            path.push(next.0);
            state = next.1;
            d -= 1;
        }
        Some(path)
    }
}
