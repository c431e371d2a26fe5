use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ContinuousAction, ImageGrid};

use super::SimError;

pub const COLOR_EMPTY: u8 = 0;
pub const COLOR_GRIPPER_OPEN: u8 = 1;
pub const COLOR_GRIPPER_CLOSED: u8 = 2;
pub const COLOR_DRAWER_CLOSED: u8 = 3;
pub const COLOR_DRAWER_OPEN: u8 = 4;
/// Number of color indices used by the renderer.
pub const NUM_COLORS: usize = 8;

/// Objects present in every world, with their render color.
pub const OBJECT_CATALOG: [(&str, u8); 3] = [("can", 5), ("orange", 6), ("sponge", 7)];

pub const DRAWER_WIDTH: usize = 4;
pub const DRAWER_STEP: f64 = 0.25;
pub const NEAR_RADIUS: usize = 2;
pub const MIN_GRID: usize = 6;

/// Threshold above which a continuous command counts as active.
pub const COMMAND_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    pub fn chebyshev(self, other: Cell) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }

    pub fn offset(self, drow: i64, dcol: i64, size: usize) -> Option<Cell> {
        let r = self.row as i64 + drow;
        let c = self.col as i64 + dcol;
        (r >= 0 && c >= 0 && (r as usize) < size && (c as usize) < size)
            .then(|| Cell::new(r as usize, c as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub name: String,
    pub color: u8,
    pub cell: Cell,
    pub held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub cell: Cell,
    pub open: bool,
}

/// Drawer front along one row; the handle sits one row below it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drawer {
    pub row: usize,
    pub col_start: usize,
    pub width: usize,
    pub open_fraction: f64,
}

impl Drawer {
    pub fn handle(&self) -> Cell {
        Cell::new(self.row + 1, self.col_start + 1)
    }

    pub fn covers(&self, cell: Cell) -> bool {
        cell.row == self.row && cell.col >= self.col_start && cell.col < self.col_start + self.width
    }

    fn open_cells(&self) -> usize {
        (self.open_fraction * self.width as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    MoveNear,
    PutOn,
    OpenDrawer,
    CloseDrawer,
    Pick,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::MoveNear,
        TaskFamily::PutOn,
        TaskFamily::OpenDrawer,
        TaskFamily::CloseDrawer,
        TaskFamily::Pick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::MoveNear => "move_near",
            TaskFamily::PutOn => "put_on",
            TaskFamily::OpenDrawer => "open_drawer",
            TaskFamily::CloseDrawer => "close_drawer",
            TaskFamily::Pick => "pick",
        }
    }

    pub fn parse(name: &str) -> Result<Self, SimError> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == name.trim())
            .ok_or_else(|| SimError::UnknownFamily(name.to_string()))
    }

    pub fn uses_drawer(self) -> bool {
        matches!(self, TaskFamily::OpenDrawer | TaskFamily::CloseDrawer)
    }

    fn has_target(self) -> bool {
        matches!(self, TaskFamily::MoveNear | TaskFamily::PutOn)
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    /// Object to manipulate; `"drawer"` for drawer tasks.
    pub source: String,
    pub target: Option<String>,
    pub near_radius: usize,
}

impl TaskSpec {
    pub fn instruction(&self) -> String {
        let tgt = self.target.as_deref().unwrap_or("");
        match self.family {
            TaskFamily::MoveNear => format!("move the {} near the {tgt}", self.source),
            TaskFamily::PutOn => format!("put the {} on the {tgt}", self.source),
            TaskFamily::Pick => format!("pick up the {}", self.source),
            TaskFamily::OpenDrawer => "open the drawer".to_string(),
            TaskFamily::CloseDrawer => "close the drawer".to_string(),
        }
    }

    /// Inverse of [`TaskSpec::instruction`].
    pub fn from_instruction(text: &str) -> Result<TaskSpec, SimError> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let spec = |family, source: &str, target: Option<&str>| TaskSpec {
            family,
            source: source.to_string(),
            target: target.map(str::to_string),
            near_radius: NEAR_RADIUS,
        };
        match words.as_slice() {
            ["move", "the", s, "near", "the", t] => Ok(spec(TaskFamily::MoveNear, s, Some(t))),
            ["put", "the", s, "on", "the", t] => Ok(spec(TaskFamily::PutOn, s, Some(t))),
            ["pick", "up", "the", s] => Ok(spec(TaskFamily::Pick, s, None)),
            ["open", "the", "drawer"] => Ok(spec(TaskFamily::OpenDrawer, "drawer", None)),
            ["close", "the", "drawer"] => Ok(spec(TaskFamily::CloseDrawer, "drawer", None)),
            _ => Err(SimError::UnknownInstruction(text.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub size: usize,
    pub objects: Vec<Object>,
    pub gripper: Gripper,
    pub drawer: Option<Drawer>,
    /// Seed the world was drawn from.
    pub rng_state: u64,
}

fn quantize(v: f64) -> i64 {
    if v >= COMMAND_THRESHOLD {
        1
    } else if v <= -COMMAND_THRESHOLD {
        -1
    } else {
        0
    }
}

impl WorldState {
    pub fn object(&self, name: &str) -> Option<&Object> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn held(&self) -> Option<&Object> {
        self.objects.iter().find(|o| o.held)
    }

    /// Gripper is closed on the drawer handle.
    pub fn grasping_handle(&self) -> bool {
        !self.gripper.open
            && self.held().is_none()
            && self.drawer.is_some_and(|d| d.handle() == self.gripper.cell)
    }

    /// Cells the gripper may not enter: the drawer front and unheld objects.
    pub fn blocked(&self, cell: Cell) -> bool {
        self.drawer.is_some_and(|d| d.covers(cell))
            || self.objects.iter().any(|o| !o.held && o.cell == cell)
    }

    /// Object a close command at `cell` would grasp: the closest unheld object
    /// within one cell (Chebyshev), ties broken by Manhattan distance then
    /// catalog order. The drawer handle takes precedence.
    pub fn grasp_candidate(&self, cell: Cell) -> Option<usize> {
        if self.drawer.is_some_and(|d| d.handle() == cell) {
            return None;
        }
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| !o.held && o.cell.chebyshev(cell) <= 1)
            .min_by_key(|(i, o)| (o.cell.chebyshev(cell), o.cell.manhattan(cell), *i))
            .map(|(i, _)| i)
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.gripper.cell.row >= self.size || self.gripper.cell.col >= self.size {
            return Err("gripper outside grid".into());
        }
        let held: Vec<_> = self.objects.iter().filter(|o| o.held).collect();
        if held.len() > 1 {
            return Err("more than one object held".into());
        }
        if let Some(h) = held.first() {
            if h.cell != self.gripper.cell {
                return Err(format!("held {} not at gripper cell", h.name));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.cell == b.cell && !a.held && !b.held {
                    return Err(format!("{} and {} share a cell", a.name, b.name));
                }
            }
        }
        Ok(())
    }

    /// Applies one action. Moves are quantized to one cell per axis and
    /// clamp at walls and obstacles; the gripper command is applied after
    /// the move.
    pub fn step(&self, action: &ContinuousAction) -> WorldState {
        let mut next = self.clone();
        let dx = quantize(action.0[0]);
        let dy = quantize(action.0[1]);

        if self.grasping_handle() && dx == 0 && dy != 0 {
            if let Some(d) = next.drawer.as_mut() {
                let delta = if dy > 0 { DRAWER_STEP } else { -DRAWER_STEP };
                d.open_fraction = (d.open_fraction + delta).clamp(0.0, 1.0);
            }
        } else if dx != 0 || dy != 0 {
            if let Some(cell) = self.gripper.cell.offset(dy, dx, self.size) {
                if !self.blocked(cell) {
                    next.gripper.cell = cell;
                    for o in next.objects.iter_mut().filter(|o| o.held) {
                        o.cell = cell;
                    }
                }
            }
        }

        let g = action.gripper();
        if g > COMMAND_THRESHOLD {
            next.gripper.open = true;
            for o in next.objects.iter_mut() {
                o.held = false;
            }
        } else if g < -COMMAND_THRESHOLD && next.gripper.open {
            next.gripper.open = false;
            let cell = next.gripper.cell;
            if let Some(i) = next.grasp_candidate(cell) {
                next.objects[i].held = true;
                next.objects[i].cell = cell;
            }
        }
        next
    }

    pub fn is_success(&self, task: &TaskSpec) -> bool {
        match task.family {
            TaskFamily::OpenDrawer => self.drawer.is_some_and(|d| d.open_fraction >= 1.0),
            TaskFamily::CloseDrawer => self.drawer.is_some_and(|d| d.open_fraction <= 0.0),
            TaskFamily::Pick => self.object(&task.source).is_some_and(|o| o.held),
            TaskFamily::MoveNear | TaskFamily::PutOn => {
                let (Some(src), Some(tgt)) = (
                    self.object(&task.source),
                    task.target.as_deref().and_then(|t| self.object(t)),
                ) else {
                    return false;
                };
                let d = src.cell.manhattan(tgt.cell);
                let placed = match task.family {
                    TaskFamily::PutOn => d == 1,
                    _ => d <= task.near_radius,
                };
                !src.held && placed
            }
        }
    }

    pub fn validate_task(&self, task: &TaskSpec) -> Result<(), SimError> {
        let missing = |name: &str| SimError::TaskMismatch(format!("no object named {name}"));
        if task.family.uses_drawer() {
            if self.drawer.is_none() {
                return Err(SimError::TaskMismatch("world has no drawer".into()));
            }
            return Ok(());
        }
        self.object(&task.source).ok_or_else(|| missing(&task.source))?;
        if task.family.has_target() {
            let t = task
                .target
                .as_deref()
                .ok_or_else(|| SimError::TaskMismatch("task needs a target".into()))?;
            self.object(t).ok_or_else(|| missing(t))?;
        }
        Ok(())
    }

    /// Top-down view: drawer, then objects, then the gripper on top.
    pub fn render(&self) -> ImageGrid {
        let mut img = ImageGrid::filled(self.size, COLOR_EMPTY);
        if let Some(d) = self.drawer {
            let open = d.open_cells();
            for i in 0..d.width {
                let color = if i < open { COLOR_DRAWER_OPEN } else { COLOR_DRAWER_CLOSED };
                img.set(d.row, d.col_start + i, color);
            }
        }
        for o in &self.objects {
            img.set(o.cell.row, o.cell.col, o.color);
        }
        let g = self.gripper;
        let color = if g.open { COLOR_GRIPPER_OPEN } else { COLOR_GRIPPER_CLOSED };
        img.set(g.cell.row, g.cell.col, color);
        img
    }

    /// Camera views; view `v` is the top-down image rotated by `v` quarter turns.
    pub fn render_views(&self, views: usize) -> Vec<ImageGrid> {
        let base = self.render();
        (0..views.max(1))
            .map(|v| {
                let mut img = base.clone();
                for _ in 0..v {
                    img = rotate_quarter(&img);
                }
                img
            })
            .collect()
    }

    /// Reconstructs a world from its top-down render. An object hidden under
    /// the gripper is held when the gripper is closed.
    pub fn from_image(img: &ImageGrid) -> Result<WorldState, SimError> {
        let size = img.size();
        let mut gripper = None;
        let mut objects = Vec::new();
        let mut drawer_cells = Vec::new();
        for row in 0..size {
            for col in 0..size {
                let c = img.get(row, col);
                let cell = Cell::new(row, col);
                match c {
                    COLOR_EMPTY => {}
                    COLOR_GRIPPER_OPEN | COLOR_GRIPPER_CLOSED => {
                        if gripper.is_some() {
                            return Err(SimError::Unreadable("two grippers".into()));
                        }
                        gripper = Some(Gripper {
                            cell,
                            open: c == COLOR_GRIPPER_OPEN,
                        });
                    }
                    COLOR_DRAWER_CLOSED | COLOR_DRAWER_OPEN => drawer_cells.push((cell, c)),
                    _ => {
                        let (name, _) = OBJECT_CATALOG
                            .iter()
                            .find(|(_, oc)| *oc == c)
                            .ok_or_else(|| SimError::Unreadable(format!("unknown color {c}")))?;
                        objects.push(Object {
                            name: name.to_string(),
                            color: c,
                            cell,
                            held: false,
                        });
                    }
                }
            }
        }
        let gripper = gripper.ok_or_else(|| SimError::Unreadable("no gripper".into()))?;
        for (name, color) in OBJECT_CATALOG {
            if objects.iter().all(|o| o.name != name) {
                objects.push(Object {
                    name: name.to_string(),
                    color,
                    cell: gripper.cell,
                    held: !gripper.open,
                });
            }
        }
        objects.sort_by_key(|o| OBJECT_CATALOG.iter().position(|(_, c)| *c == o.color));
        let drawer = match drawer_cells.first() {
            None => None,
            Some((first, _)) => {
                let open = drawer_cells.iter().filter(|(_, c)| *c == COLOR_DRAWER_OPEN).count();
                Some(Drawer {
                    row: first.row,
                    col_start: first.col,
                    width: drawer_cells.len(),
                    open_fraction: open as f64 / drawer_cells.len() as f64,
                })
            }
        };
        let world = WorldState {
            size,
            objects,
            gripper,
            drawer,
            rng_state: 0,
        };
        world.check_invariants().map_err(SimError::Unreadable)?;
        Ok(world)
    }

    /// Stable 64-bit digest of the physical state (FNV-1a).
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(self.size as u64);
        for o in &self.objects {
            feed(u64::from(o.color));
            feed(o.cell.row as u64);
            feed(o.cell.col as u64);
            feed(u64::from(o.held));
        }
        feed(self.gripper.cell.row as u64);
        feed(self.gripper.cell.col as u64);
        feed(u64::from(self.gripper.open));
        if let Some(d) = self.drawer {
            feed(d.row as u64);
            feed(d.col_start as u64);
            feed(d.open_fraction.to_bits());
        }
        h
    }
}

fn rotate_quarter(img: &ImageGrid) -> ImageGrid {
    let n = img.size();
    let mut out = ImageGrid::filled(n, COLOR_EMPTY);
    for r in 0..n {
        for c in 0..n {
            out.set(c, n - 1 - r, img.get(r, c));
        }
    }
    out
}

/// Mixes a family and seed into an RNG seed.
pub(crate) fn world_seed(family: TaskFamily, seed: u64) -> u64 {
    let tag = TaskFamily::ALL.iter().position(|f| *f == family).unwrap_or(0) as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Samples a world without checking solvability.
pub(crate) fn sample_world(
    family: TaskFamily,
    size: usize,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> (WorldState, TaskSpec) {
    let drawer = family.uses_drawer().then(|| Drawer {
        row: 0,
        col_start: rng.random_range(0..=size - DRAWER_WIDTH),
        width: DRAWER_WIDTH,
        open_fraction: match family {
            TaskFamily::CloseDrawer => [0.5, 0.75, 1.0][rng.random_range(0..3)],
            _ => 0.0,
        },
    });
    let mut taken: Vec<Cell> = Vec::new();
    if let Some(d) = drawer {
        taken.extend((0..d.width).map(|i| Cell::new(d.row, d.col_start + i)));
        taken.push(d.handle());
    }
    let free_cell = |rng: &mut ChaCha8Rng, taken: &mut Vec<Cell>| loop {
        let c = Cell::new(rng.random_range(0..size), rng.random_range(0..size));
        if !taken.contains(&c) {
            taken.push(c);
            return c;
        }
    };
    let mut objects: Vec<Object> = OBJECT_CATALOG
        .iter()
        .map(|(name, color)| Object {
            name: name.to_string(),
            color: *color,
            cell: Cell::new(0, 0),
            held: false,
        })
        .collect();
    for o in objects.iter_mut() {
        o.cell = free_cell(rng, &mut taken);
    }
    let gripper = Gripper {
        cell: free_cell(rng, &mut taken),
        open: true,
    };
    let src = rng.random_range(0..OBJECT_CATALOG.len());
    let tgt = (src + rng.random_range(1..OBJECT_CATALOG.len())) % OBJECT_CATALOG.len();
    let task = TaskSpec {
        family,
        source: if family.uses_drawer() {
            "drawer".to_string()
        } else {
            OBJECT_CATALOG[src].0.to_string()
        },
        target: family.has_target().then(|| OBJECT_CATALOG[tgt].0.to_string()),
        near_radius: NEAR_RADIUS,
    };
    let world = WorldState {
        size,
        objects,
        gripper,
        drawer,
        rng_state: seed,
    };
    (world, task)
}
