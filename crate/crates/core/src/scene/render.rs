use crate::geometry::{Intrinsics, RigidTransform};
use crate::maps::{ClassSet, DepthMap, Grid, SemanticMap};

pub(crate) const CEILING: f64 = 100.0;
pub(crate) const SIDE_WALL: f64 = 30.0;
pub(crate) const FRONT_WALL: f64 = 150.0;
pub(crate) const REAR_WALL: f64 = -40.0;
const ROAD_HALF_WIDTH: f64 = 4.0;
const NEAR: f64 = 1e-6;

/// Oriented box resting on the ground, moving at constant speed and turn rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub class_k: usize,
    /// Half length, half width, half height.
    pub half: [f64; 3],
    pub x0: f64,
    pub y0: f64,
    pub heading0: f64,
    pub speed: f64,
    pub turn: f64,
}

impl Body {
    pub fn state(&self, time: f64) -> (f64, f64, f64) {
        let h = self.heading0 + self.turn * time;
        if (self.turn * time).abs() < 1e-9 {
            let d = self.speed * time;
            return (self.x0 + d * self.heading0.cos(), self.y0 + d * self.heading0.sin(), h);
        }
        let r = self.speed / self.turn;
        (
            self.x0 + r * (h.sin() - self.heading0.sin()),
            self.y0 - r * (h.cos() - self.heading0.cos()),
            h,
        )
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn radius(&self) -> f64 {
        self.half[0].hypot(self.half[1])
    }
}

#[derive(Debug, Clone, Copy)]
enum Plane {
    Ground,
    Ceiling,
    LeftWall,
    RightWall,
    FrontWall,
    RearWall,
}

const PLANES: [Plane; 6] = [
    Plane::Ground,
    Plane::Ceiling,
    Plane::LeftWall,
    Plane::RightWall,
    Plane::FrontWall,
    Plane::RearWall,
];

impl Plane {
    fn axis_value(self) -> (usize, f64) {
        match self {
            Plane::Ground => (2, 0.0),
            Plane::Ceiling => (2, CEILING),
            Plane::LeftWall => (1, SIDE_WALL),
            Plane::RightWall => (1, -SIDE_WALL),
            Plane::FrontWall => (0, FRONT_WALL),
            Plane::RearWall => (0, REAR_WALL),
        }
    }

    /// Stuff rank at a world point: road, sidewalk, building, vegetation, sky.
    fn rank(self, p: [f64; 3]) -> usize {
        match self {
            Plane::Ground if p[1].abs() < ROAD_HALF_WIDTH => 0,
            Plane::Ground => 1,
            Plane::LeftWall | Plane::RightWall => 2,
            Plane::FrontWall | Plane::RearWall => 3,
            Plane::Ceiling => 4,
        }
    }

    fn hit(self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (axis, value) = self.axis_value();
        if d[axis].abs() < 1e-12 {
            return None;
        }
        let t = (value - o[axis]) / d[axis];
        (t > NEAR).then_some(t)
    }
}

/// Body pose frozen at one instant.
#[derive(Clone, Copy)]
struct Placed {
    x: f64,
    y: f64,
    cos: f64,
    sin: f64,
    half: [f64; 3],
}

impl Placed {
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        // ray in the body frame
        let (px, py) = (o[0] - self.x, o[1] - self.y);
        let lo = [
            self.cos * px + self.sin * py,
            -self.sin * px + self.cos * py,
            o[2] - self.half[2],
        ];
        let ld = [
            self.cos * d[0] + self.sin * d[1],
            -self.sin * d[0] + self.cos * d[1],
            d[2],
        ];
        let (mut enter, mut exit) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if ld[a].abs() < 1e-12 {
                if lo[a].abs() > self.half[a] {
                    return None;
                }
                continue;
            }
            let t1 = (-self.half[a] - lo[a]) / ld[a];
            let t2 = (self.half[a] - lo[a]) / ld[a];
            enter = enter.max(t1.min(t2));
            exit = exit.min(t1.max(t2));
        }
        (enter <= exit && enter > NEAR).then_some(enter)
    }

    fn corners(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..8).map(move |k| {
            let sx = if k & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if k & 2 == 0 { -1.0 } else { 1.0 };
            let z = if k & 4 == 0 { 0.0 } else { 2.0 * self.half[2] };
            let (lx, ly) = (sx * self.half[0], sy * self.half[1]);
            [self.x + self.cos * lx - self.sin * ly, self.y + self.sin * lx + self.cos * ly, z]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub semantic: SemanticMap,
    pub depth: DepthMap,
    /// Body index + 1 per pixel, 0 for background.
    pub instance: Grid<u16>,
}

/// Static room plus moving bodies.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub classes: ClassSet,
    pub bodies: Vec<Body>,
}

struct Camera<'a> {
    k: &'a Intrinsics,
    pose: &'a RigidTransform,
    origin: [f64; 3],
}

impl Camera<'_> {
    /// World-frame ray through pixel centre `(row, col)`; parameter t equals camera depth.
    fn ray(&self, row: usize, col: usize) -> [f64; 3] {
        let d = [(col as f64 - self.k.cx) / self.k.fx, (row as f64 - self.k.cy) / self.k.fy, 1.0];
        self.pose.apply_dir(d)
    }
}

struct Buffers {
    width: usize,
    depth: Vec<f64>,
    semantic: Vec<u16>,
    instance: Vec<u16>,
}

impl World {
    fn placed(&self, time: f64) -> Vec<Placed> {
        self.bodies
            .iter()
            .map(|b| {
                let (x, y, h) = b.state(time);
                let (sin, cos) = h.sin_cos();
                Placed { x, y, cos, sin, half: b.half }
            })
            .collect()
    }

    fn stuff_label(&self, plane: Plane, p: [f64; 3]) -> u16 {
        plane.rank(p).min(self.classes.num_stuff() - 1) as u16
    }

    /// Renders the view from camera pose `pose` (camera → world) at `time`.
    pub fn render(&self, k: &Intrinsics, pose: &RigidTransform, time: f64, height: usize, width: usize) -> Rendered {
        let cam = Camera {
            k,
            pose,
            origin: pose.apply([0.0; 3]),
        };
        let n = height * width;
        let mut buf = Buffers {
            width,
            depth: vec![f64::INFINITY; n],
            semantic: vec![0; n],
            instance: vec![0; n],
        };
        for plane in PLANES {
            for row in 0..height {
                for col in 0..width {
                    let d = cam.ray(row, col);
                    if let Some(t) = plane.hit(cam.origin, d) {
                        let p = [cam.origin[0] + t * d[0], cam.origin[1] + t * d[1], cam.origin[2] + t * d[2]];
                        buf.write(row, col, t, self.stuff_label(plane, p), 0);
                    }
                }
            }
        }
        let world_to_cam = pose.inverse();
        for (idx, body) in self.placed(time).iter().enumerate() {
            let Some((r0, r1, c0, c1)) = screen_bounds(body, &world_to_cam, k, height, width) else {
                continue;
            };
            let class = self.classes.thing_class(self.bodies[idx].class_k);
            for row in r0..r1 {
                for col in c0..c1 {
                    if let Some(t) = body.hit(cam.origin, cam.ray(row, col)) {
                        buf.write(row, col, t, class, (idx + 1) as u16);
                    }
                }
            }
        }
        buf.finish(height)
    }

    /// Per-pixel scan over every surface without culling.
    #[cfg(test)]
    fn render_exhaustive(&self, k: &Intrinsics, pose: &RigidTransform, time: f64, height: usize, width: usize) -> Rendered {
        let cam = Camera {
            k,
            pose,
            origin: pose.apply([0.0; 3]),
        };
        let placed = self.placed(time);
        let n = height * width;
        let mut buf = Buffers {
            width,
            depth: vec![f64::INFINITY; n],
            semantic: vec![0; n],
            instance: vec![0; n],
        };
        for row in 0..height {
            for col in 0..width {
                let d = cam.ray(row, col);
                for plane in PLANES {
                    if let Some(t) = plane.hit(cam.origin, d) {
                        let p = [cam.origin[0] + t * d[0], cam.origin[1] + t * d[1], cam.origin[2] + t * d[2]];
                        buf.write(row, col, t, self.stuff_label(plane, p), 0);
                    }
                }
                for (idx, body) in placed.iter().enumerate() {
                    if let Some(t) = body.hit(cam.origin, d) {
                        buf.write(row, col, t, self.classes.thing_class(self.bodies[idx].class_k), (idx + 1) as u16);
                    }
                }
            }
        }
        buf.finish(height)
    }
}

impl Buffers {
    fn write(&mut self, row: usize, col: usize, t: f64, class: u16, instance: u16) {
        let i = row * self.width + col;
        if t < self.depth[i] {
            self.depth[i] = t;
            self.semantic[i] = class;
            self.instance[i] = instance;
        }
    }

    fn finish(self, height: usize) -> Rendered {
        let w = self.width;
        Rendered {
            semantic: Grid::from_vec(height, w, self.semantic).expect("sized"),
            depth: Grid::from_vec(height, w, self.depth.iter().map(|&d| d as f32).collect()).expect("sized"),
            instance: Grid::from_vec(height, w, self.instance).expect("sized"),
        }
    }
}

/// Pixel rectangle `[r0, r1) × [c0, c1)` that can contain the body, or
/// `None` when it is certainly off screen.
fn screen_bounds(
    body: &Placed,
    world_to_cam: &RigidTransform,
    k: &Intrinsics,
    height: usize,
    width: usize,
) -> Option<(usize, usize, usize, usize)> {
    let cam: Vec<[f64; 3]> = body.corners().map(|c| world_to_cam.apply(c)).collect();
    if cam.iter().all(|p| p[2] <= 0.0) {
        return None;
    }
    if cam.iter().any(|p| p[2] < 0.05) {
        return Some((0, height, 0, width));
    }
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &cam {
        let (u, v) = k.project(*p);
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let clamp = |x: f64, hi: usize| x.max(0.0).min(hi as f64) as usize;
    let (c0, c1) = (clamp(umin.floor() - 1.0, width), clamp(umax.ceil() + 2.0, width));
    let (r0, r1) = (clamp(vmin.floor() - 1.0, height), clamp(vmax.ceil() + 2.0, height));
    (c0 < c1 && r0 < r1).then_some((r0, r1, c0, c1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{vehicle_transform, Extrinsics, Pose2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn culled_render_matches_exhaustive_scan() {
        let k = Intrinsics::centered(12.0, 12.0, 16, 16).unwrap();
        let ext = Extrinsics::forward_camera(1.4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..200 {
            let bodies = (0..rng.random_range(1..6))
                .map(|_| Body {
                    class_k: rng.random_range(0..2),
                    half: [rng.random_range(0.2..3.0), rng.random_range(0.2..1.5), rng.random_range(0.3..1.2)],
                    x0: rng.random_range(1.0..25.0),
                    y0: rng.random_range(-8.0..8.0),
                    heading0: rng.random_range(-3.0..3.0),
                    speed: rng.random_range(0.0..5.0),
                    turn: rng.random_range(-0.5..0.5),
                })
                .collect();
            let world = World {
                classes: ClassSet::new(5, 2),
                bodies,
            };
            let veh = vehicle_transform(Pose2 {
                x: rng.random_range(-2.0..2.0),
                y: rng.random_range(-2.0..2.0),
                theta: rng.random_range(-0.5..0.5),
            });
            let pose = veh * ext.0.inverse();
            let time = rng.random_range(0.0..2.0);
            let a = world.render(&k, &pose, time, 16, 16);
            let b = world.render_exhaustive(&k, &pose, time, 16, 16);
            assert_eq!(a, b, "case {case}");
        }
    }

    #[test]
    fn depth_is_camera_z() {
        // looking straight at the front wall from x = 0
        let world = World {
            classes: ClassSet::new(5, 2),
            bodies: vec![],
        };
        let k = Intrinsics::centered(16.0, 16.0, 17, 17).unwrap();
        let pose = Extrinsics::forward_camera(1.4).0.inverse();
        let r = world.render(&k, &pose, 0.0, 17, 17);
        let centre = *r.depth.get(8, 8);
        assert!((centre as f64 - FRONT_WALL).abs() < 1e-4);
        // ground below the horizon: depth = height · fy / (v − cy)
        let d = *r.depth.get(16, 8) as f64;
        assert!((d - 1.4 * 16.0 / 8.0).abs() < 1e-5);
        assert_eq!(*r.semantic.get(16, 8), 0);
        assert_eq!(*r.semantic.get(8, 8), 3);
        // pitched up far enough to clear the front wall
        let up = RigidTransform::from_parts(nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::x_axis(), 1.2).into_inner(), nalgebra::Vector3::zeros());
        let r = world.render(&k, &(pose * up), 0.0, 17, 17);
        assert_eq!(*r.semantic.get(0, 8), 4);
    }

    #[test]
    fn turning_body_follows_arc() {
        let b = Body {
            class_k: 0,
            half: [1.0; 3],
            x0: 0.0,
            y0: 0.0,
            heading0: 0.0,
            speed: 1.0,
            turn: std::f64::consts::FRAC_PI_2,
        };
        let (x, y, h) = b.state(1.0);
        let r = 2.0 / std::f64::consts::PI;
        assert!((x - r).abs() < 1e-12 && (y - r).abs() < 1e-12);
        assert!((h - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
