//! Ground-truth reasoning traces templated from the simulator state.

use crate::data::ReasoningTrace;

use super::expert::remaining_plan;
use super::world::{Cell, TaskFamily, TaskSpec, WorldState};
use super::SimError;

pub const TASK_COMPLETE: &str = "Task complete";
pub const HOLD_POSITION: &str = "hold position";

/// Direction of `a` as seen from `b`, e.g. "down left".
pub fn relative_direction(a: Cell, b: Cell) -> &'static str {
    use std::cmp::Ordering::*;
    match (a.row.cmp(&b.row), a.col.cmp(&b.col)) {
        (Less, Less) => "up left",
        (Less, Equal) => "up",
        (Less, Greater) => "up right",
        (Equal, Less) => "left",
        (Equal, Equal) => "at",
        (Equal, Greater) => "right",
        (Greater, Less) => "down left",
        (Greater, Equal) => "down",
        (Greater, Greater) => "down right",
    }
}

fn relation(a_name: &str, a: Cell, b_name: &str, b: Cell) -> String {
    match relative_direction(a, b) {
        "at" => format!("The {a_name} is at the {b_name}."),
        dir => format!("The {a_name} is {dir} of the {b_name}."),
    }
}

fn drawer_state(open_fraction: f64) -> &'static str {
    if open_fraction <= 0.0 {
        "closed"
    } else if open_fraction >= 1.0 {
        "open"
    } else {
        "partly open"
    }
}

/// Four-section trace built from true positions and the expert's remaining plan.
pub fn ground_truth_trace(world: &WorldState, task: &TaskSpec) -> Result<ReasoningTrace, SimError> {
    let plan = remaining_plan(world, task)?;
    let names: Vec<&str> = world.objects.iter().map(|o| o.name.as_str()).collect();

    let mut observation = format!("I see the {} and the robot gripper on the table.", names.join(", the "));
    if world.drawer.is_some() {
        observation.push_str(" There is a drawer at the top of the table.");
    }

    let grip = if let Some(h) = world.held() {
        format!("The gripper is closed and holds the {}.", h.name)
    } else if world.grasping_handle() {
        "The gripper is closed on the drawer handle.".to_string()
    } else if world.gripper.open {
        "The gripper is open and holds nothing.".to_string()
    } else {
        "The gripper is closed and holds nothing.".to_string()
    };
    let situation_analysis = format!("{grip} The task is to {}.", task.instruction());

    let g = world.gripper.cell;
    let mut spatial = Vec::new();
    match task.family {
        TaskFamily::OpenDrawer | TaskFamily::CloseDrawer => {
            let d = world.drawer.expect("validated by remaining_plan");
            let h = d.handle();
            spatial.push(format!("The handle is at row {} column {}.", h.row, h.col));
            spatial.push(format!("The gripper is at row {} column {}.", g.row, g.col));
            spatial.push(format!("The drawer is {}.", drawer_state(d.open_fraction)));
            spatial.push(relation("handle", h, "gripper", g));
        }
        _ => {
            let src = world.object(&task.source).expect("validated");
            spatial.push(format!("The {} is at row {} column {}.", src.name, src.cell.row, src.cell.col));
            let tgt = task.target.as_deref().and_then(|t| world.object(t));
            if let Some(t) = tgt {
                spatial.push(format!("The {} is at row {} column {}.", t.name, t.cell.row, t.cell.col));
            }
            spatial.push(format!("The gripper is at row {} column {}.", g.row, g.col));
            if !src.held {
                spatial.push(relation(&src.name, src.cell, "gripper", g));
            }
            if let Some(t) = tgt {
                spatial.push(relation(&src.name, src.cell, &t.name, t.cell));
            }
        }
    }

    let task_planning = format!("The robot needs to {}", task.instruction());
    let (logical_steps, sub_action) = if plan.is_empty() {
        (vec![TASK_COMPLETE.to_string()], HOLD_POSITION.to_string())
    } else {
        let steps: Vec<String> = plan.iter().map(|p| p.describe()).collect();
        let next = steps[0].clone();
        (steps, next)
    };

    Ok(ReasoningTrace {
        observation,
        situation_analysis,
        spatial_reasoning: spatial.join(" "),
        task_planning,
        logical_steps,
        sub_action,
    })
}
