//! Scripted expert: shortest-path approach, grasp, carry and release.

use std::collections::VecDeque;

use crate::data::ContinuousAction;

use super::world::{Cell, TaskFamily, TaskSpec, WorldState};
use super::SimError;

const MOVES: [(i64, i64); 8] = [
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
];

/// First move (drow, dcol) and path length of a shortest 8-connected path
/// from the gripper to any goal cell. `Some((0, 0, 0))` when already there.
pub fn shortest_move(world: &WorldState, goal: impl Fn(Cell) -> bool) -> Option<(i64, i64, usize)> {
    let start = world.gripper.cell;
    if goal(start) {
        return Some((0, 0, 0));
    }
    let n = world.size;
    let mut first: Vec<Option<(i64, i64)>> = vec![None; n * n];
    let mut dist = vec![usize::MAX; n * n];
    dist[start.row * n + start.col] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(cell) = queue.pop_front() {
        let d = dist[cell.row * n + cell.col];
        for (dr, dc) in MOVES {
            let Some(next) = cell.offset(dr, dc, n) else { continue };
            let idx = next.row * n + next.col;
            if dist[idx] != usize::MAX || world.blocked(next) {
                continue;
            }
            dist[idx] = d + 1;
            first[idx] = first[cell.row * n + cell.col].or(Some((dr, dc)));
            if goal(next) {
                let (r, c) = first[idx].expect("set above");
                return Some((r, c, d + 1));
            }
            queue.push_back(next);
        }
    }
    None
}

fn object_index(world: &WorldState, name: &str) -> Result<usize, SimError> {
    world
        .objects
        .iter()
        .position(|o| o.name == name)
        .ok_or_else(|| SimError::TaskMismatch(format!("no object named {name}")))
}

fn placement_ok(world: &WorldState, task: &TaskSpec, cell: Cell) -> bool {
    let Some(tgt) = task.target.as_deref().and_then(|t| world.object(t)) else {
        return false;
    };
    let d = cell.manhattan(tgt.cell);
    match task.family {
        TaskFamily::PutOn => d == 1,
        _ => d >= 1 && d <= task.near_radius,
    }
}

fn grasp_ready(world: &WorldState, src: usize) -> bool {
    world.grasp_candidate(world.gripper.cell) == Some(src)
}

/// One step of the expert's remaining plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Primitive {
    Approach(String),
    Grasp(String),
    Carry { source: String, target: String },
    Release(String),
    ApproachHandle,
    GraspHandle,
    PullHandle,
    PushHandle,
}

impl Primitive {
    pub fn describe(&self) -> String {
        match self {
            Primitive::Approach(o) => format!("approach {o}"),
            Primitive::Grasp(o) => format!("grasp {o}"),
            Primitive::Carry { source, target } => format!("carry {source} to {target}"),
            Primitive::Release(o) => format!("release {o}"),
            Primitive::ApproachHandle => "approach handle".into(),
            Primitive::GraspHandle => "grasp handle".into(),
            Primitive::PullHandle => "pull handle".into(),
            Primitive::PushHandle => "push handle".into(),
        }
    }
}

/// Remaining plan from `world`; empty once the task is solved.
pub fn remaining_plan(world: &WorldState, task: &TaskSpec) -> Result<Vec<Primitive>, SimError> {
    world.validate_task(task)?;
    if world.is_success(task) {
        return Ok(Vec::new());
    }
    let mut plan = Vec::new();
    match task.family {
        TaskFamily::OpenDrawer | TaskFamily::CloseDrawer => {
            let handle = world.drawer.expect("validated").handle();
            if world.gripper.cell != handle {
                plan.push(Primitive::ApproachHandle);
            }
            if !world.grasping_handle() {
                plan.push(Primitive::GraspHandle);
            }
            plan.push(if task.family == TaskFamily::OpenDrawer {
                Primitive::PullHandle
            } else {
                Primitive::PushHandle
            });
        }
        _ => {
            let src = object_index(world, &task.source)?;
            let name = task.source.clone();
            if !world.objects[src].held {
                if !(grasp_ready(world, src) && world.gripper.open) {
                    plan.push(Primitive::Approach(name.clone()));
                }
                plan.push(Primitive::Grasp(name.clone()));
            }
            if let Some(target) = task.target.clone() {
                if !(world.objects[src].held && placement_ok(world, task, world.gripper.cell)) {
                    plan.push(Primitive::Carry {
                        source: name.clone(),
                        target,
                    });
                }
                plan.push(Primitive::Release(name));
            }
        }
    }
    Ok(plan)
}

const OPEN: f64 = 1.0;
const CLOSE: f64 = -1.0;

fn move_toward(world: &WorldState, goal: impl Fn(Cell) -> bool) -> Result<ContinuousAction, SimError> {
    match shortest_move(world, goal) {
        Some((dr, dc, _)) => Ok(ContinuousAction::planar(dc as f64, dr as f64, 0.0)),
        None => Err(SimError::Unsolvable("goal unreachable".into())),
    }
}

/// Expert action for `world`. Returns the hold action once the task is solved.
pub fn scripted_expert(world: &WorldState, task: &TaskSpec) -> Result<ContinuousAction, SimError> {
    world.validate_task(task)?;
    if world.is_success(task) {
        return Ok(ContinuousAction::HOLD);
    }
    match task.family {
        TaskFamily::OpenDrawer | TaskFamily::CloseDrawer => {
            let handle = world.drawer.expect("validated").handle();
            if world.held().is_some() {
                return Ok(ContinuousAction::planar(0.0, 0.0, OPEN));
            }
            if world.gripper.cell == handle {
                if world.gripper.open {
                    return Ok(ContinuousAction::planar(0.0, 0.0, CLOSE));
                }
                let dy = if task.family == TaskFamily::OpenDrawer { 1.0 } else { -1.0 };
                return Ok(ContinuousAction::planar(0.0, dy, 0.0));
            }
            move_toward(world, |c| c == handle)
        }
        _ => {
            let src = object_index(world, &task.source)?;
            if world.objects[src].held {
                if placement_ok(world, task, world.gripper.cell) {
                    return Ok(ContinuousAction::planar(0.0, 0.0, OPEN));
                }
                return move_toward(world, |c| placement_ok(world, task, c));
            }
            if world.held().is_some() || !world.gripper.open {
                return Ok(ContinuousAction::planar(0.0, 0.0, OPEN));
            }
            if grasp_ready(world, src) {
                return Ok(ContinuousAction::planar(0.0, 0.0, CLOSE));
            }
            move_toward(world, |c| world.grasp_candidate(c) == Some(src))
        }
    }
}

/// Distance-to-subgoal used to audit expert progress: (phases left, path length).
pub fn progress(world: &WorldState, task: &TaskSpec) -> Result<(usize, usize), SimError> {
    let plan = remaining_plan(world, task)?;
    let dist = match task.family {
        TaskFamily::OpenDrawer | TaskFamily::CloseDrawer => {
            let d = world.drawer.expect("validated");
            let handle = d.handle();
            let travel = shortest_move(world, |c| c == handle).map_or(usize::MAX, |m| m.2);
            let remaining = match task.family {
                TaskFamily::OpenDrawer => 1.0 - d.open_fraction,
                _ => d.open_fraction,
            };
            travel + (remaining / super::world::DRAWER_STEP).round() as usize
        }
        _ => {
            let src = object_index(world, &task.source)?;
            if world.objects[src].held {
                shortest_move(world, |c| placement_ok(world, task, c)).map_or(usize::MAX, |m| m.2)
            } else {
                shortest_move(world, |c| world.grasp_candidate(c) == Some(src)).map_or(usize::MAX, |m| m.2)
            }
        }
    };
    Ok((plan.len(), dist))
}
