//! Reference-element basis functions, triangle quadrature and dof numbering.

use crate::error::{bail, Result};
use crate::mesh::Mesh2D;

/// Quadrature rule on the reference triangle in barycentric coordinates.
/// Weights are scaled so that they sum to the reference area 1/2.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub degree: usize,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Iterator over `(barycentric point, weight scaled to a triangle of the given area)`.
    pub fn scaled(&self, area: f64) -> impl Iterator<Item = ([f64; 3], f64)> + '_ {
        self.points.iter().zip(&self.weights).map(move |(p, w)| (*p, 2.0 * area * w))
    }
}

fn orbit3(a: f64, w: f64, pts: &mut Vec<[f64; 3]>, wts: &mut Vec<f64>) {
    let b = 1.0 - 2.0 * a;
    for p in [[a, a, b], [a, b, a], [b, a, a]] {
        pts.push(p);
        wts.push(w);
    }
}

fn orbit6(a: f64, b: f64, w: f64, pts: &mut Vec<[f64; 3]>, wts: &mut Vec<f64>) {
    let c = 1.0 - a - b;
    for p in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
        pts.push(p);
        wts.push(w);
    }
}

/// Symmetric triangle rule exact for polynomials up to `degree` (1..=6).
pub fn quadrature(degree: usize) -> Result<QuadratureRule> {
    let mut pts = Vec::new();
    let mut wts = Vec::new();
    let third = 1.0 / 3.0;
    let exact = match degree {
        1 => {
            pts.push([third; 3]);
            wts.push(0.5);
            1
        }
        2 => {
            orbit3(1.0 / 6.0, 1.0 / 6.0, &mut pts, &mut wts);
            2
        }
        3 | 4 => {
            orbit3(0.445_948_490_915_964_886_32, 0.111_690_794_839_005_732_85, &mut pts, &mut wts);
            orbit3(0.091_576_213_509_770_743_46, 0.054_975_871_827_660_933_819, &mut pts, &mut wts);
            4
        }
        5 => {
            let s = 15f64.sqrt();
            pts.push([third; 3]);
            wts.push(9.0 / 80.0);
            orbit3((6.0 - s) / 21.0, (155.0 - s) / 2400.0, &mut pts, &mut wts);
            orbit3((6.0 + s) / 21.0, (155.0 + s) / 2400.0, &mut pts, &mut wts);
            5
        }
        6 => {
            orbit3(0.249_286_745_170_910_421_29, 0.058_393_137_863_189_683_013, &mut pts, &mut wts);
            orbit3(0.063_089_014_491_502_228_34, 0.025_422_453_185_103_408_46, &mut pts, &mut wts);
            orbit6(
                0.053_145_049_844_816_947_353,
                0.310_352_451_033_784_405_42,
                0.041_425_537_809_186_787_597,
                &mut pts,
                &mut wts,
            );
            6
        }
        _ => bail!(Argument, "no quadrature rule of degree {degree} (supported: 1..=6)"),
    };
    Ok(QuadratureRule { degree: exact, points: pts, weights: wts })
}

/// Gauss-Legendre rule on `[0, 1]` with weights summing to 1.
pub fn gauss_line(n: usize) -> Result<Vec<(f64, f64)>> {
    let rule: Vec<(f64, f64)> = match n {
        1 => vec![(0.0, 2.0)],
        2 => {
            let a = 1.0 / 3f64.sqrt();
            vec![(-a, 1.0), (a, 1.0)]
        }
        3 => {
            let a = (3.0f64 / 5.0).sqrt();
            vec![(-a, 5.0 / 9.0), (0.0, 8.0 / 9.0), (a, 5.0 / 9.0)]
        }
        _ => bail!(Argument, "no Gauss rule with {n} points (supported: 1..=3)"),
    };
    Ok(rule.into_iter().map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect())
}

/// Affine data of one triangle: area and the constant barycentric gradients.
#[derive(Clone, Copy, Debug)]
pub struct TriangleGeometry {
    pub coords: [[f64; 2]; 3],
    pub area: f64,
    pub grads: [[f64; 2]; 3],
}

impl TriangleGeometry {
    pub fn new(coords: [[f64; 2]; 3]) -> Result<Self> {
        let [p0, p1, p2] = coords;
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let scale = (p1[0] - p0[0]).abs() + (p1[1] - p0[1]).abs() + (p2[0] - p0[0]).abs() + (p2[1] - p0[1]).abs();
        if det.abs() <= 1e-14 * scale * scale {
            bail!(Geometry, "degenerate triangle {:?}", coords);
        }
        let grads = [
            [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
            [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
            [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
        ];
        Ok(TriangleGeometry { coords, area: 0.5 * det.abs(), grads })
    }

    pub fn of(mesh: &Mesh2D, t: usize) -> Result<Self> {
        Self::new(mesh.coords(t))
    }

    pub fn point(&self, bary: [f64; 3]) -> [f64; 2] {
        let c = &self.coords;
        [
            bary[0] * c[0][0] + bary[1] * c[1][0] + bary[2] * c[2][0],
            bary[0] * c[0][1] + bary[1] * c[1][1] + bary[2] * c[2][1],
        ]
    }

    /// Gradient of a P1 field with the given vertex values.
    pub fn gradient(&self, values: [f64; 3]) -> [f64; 2] {
        let g = &self.grads;
        [
            values[0] * g[0][0] + values[1] * g[1][0] + values[2] * g[2][0],
            values[0] * g[0][1] + values[1] * g[1][1] + values[2] * g[2][1],
        ]
    }
}

/// P1 basis values at a barycentric point together with their gradients.
pub fn p1_eval(bary: [f64; 3], geom: &TriangleGeometry) -> ([f64; 3], [[f64; 2]; 3]) {
    (bary, geom.grads)
}

/// Cubic bubble `27 l1 l2 l3` and its gradient.
pub fn bubble_eval(bary: [f64; 3], geom: &TriangleGeometry) -> (f64, [f64; 2]) {
    let [l1, l2, l3] = bary;
    let g = &geom.grads;
    let d = [27.0 * l2 * l3, 27.0 * l1 * l3, 27.0 * l1 * l2];
    let grad = [d[0] * g[0][0] + d[1] * g[1][0] + d[2] * g[2][0], d[0] * g[0][1] + d[1] * g[1][1] + d[2] * g[2][1]];
    (27.0 * l1 * l2 * l3, grad)
}

/// Dof numbering for one subdomain.
///
/// Species are node-major (`vertex * m + species`). The elasticity vector holds
/// the vertex displacements `2 * v + c`, then the bubbles `2 * (nv + t) + c`,
/// then one pressure per vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DofMap {
    pub num_vertices: usize,
    pub num_triangles: usize,
    pub num_species: usize,
}

impl DofMap {
    pub fn new(mesh: &Mesh2D, num_species: usize) -> Self {
        DofMap { num_vertices: mesh.num_vertices(), num_triangles: mesh.num_triangles(), num_species }
    }

    pub fn species_len(&self) -> usize {
        self.num_vertices * self.num_species
    }

    pub fn species(&self, vertex: usize, i: usize) -> usize {
        vertex * self.num_species + i
    }

    pub fn displacement_len(&self) -> usize {
        2 * (self.num_vertices + self.num_triangles)
    }

    pub fn pressure_len(&self) -> usize {
        self.num_vertices
    }

    pub fn elasticity_len(&self) -> usize {
        self.displacement_len() + self.pressure_len()
    }

    pub fn vertex_disp(&self, vertex: usize, c: usize) -> usize {
        2 * vertex + c
    }

    pub fn bubble_disp(&self, triangle: usize, c: usize) -> usize {
        2 * (self.num_vertices + triangle) + c
    }

    pub fn pressure(&self, vertex: usize) -> usize {
        self.displacement_len() + vertex
    }

    /// The 8 local displacement basis functions of a triangle as
    /// `(global dof, component, local index)`; local indices 0..3 are vertices,
    /// 3 is the bubble.
    pub fn local_disp(&self, tri: [usize; 3], t: usize) -> [(usize, usize, usize); 8] {
        let mut out = [(0, 0, 0); 8];
        let mut k = 0;
        for (a, &v) in tri.iter().enumerate() {
            for c in 0..2 {
                out[k] = (self.vertex_disp(v, c), c, a);
                k += 1;
            }
        }
        for c in 0..2 {
            out[k] = (self.bubble_disp(t, c), c, 3);
            k += 1;
        }
        out
    }
}

/// Values and gradients of the four scalar MINI shape functions (three vertex
/// hats and the bubble) at a barycentric point.
pub fn mini_eval(bary: [f64; 3], geom: &TriangleGeometry) -> ([f64; 4], [[f64; 2]; 4]) {
    let (b, gb) = bubble_eval(bary, geom);
    ([bary[0], bary[1], bary[2], b], [geom.grads[0], geom.grads[1], geom.grads[2], gb])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> TriangleGeometry {
        TriangleGeometry::new([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    /// Closed-form integral of l1^a l2^b l3^c over the reference triangle.
    fn monomial(a: u32, b: u32, c: u32) -> f64 {
        factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 2) * 2.0 * 0.5
    }

    fn integrate(rule: &QuadratureRule, a: u32, b: u32, c: u32) -> f64 {
        rule.points
            .iter()
            .zip(&rule.weights)
            .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32) * p[2].powi(c as i32))
            .sum()
    }

    #[test]
    fn p1_nodal_values_and_gradients() {
        let g = reference();
        assert_eq!(p1_eval([1.0, 0.0, 0.0], &g).0, [1.0, 0.0, 0.0]);
        let (v, grads) = p1_eval([1.0 / 3.0; 3], &g);
        assert!(v.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(grads[0], [-1.0, -1.0]);
        assert_eq!(grads[1], [1.0, 0.0]);
        assert_eq!(grads[2], [0.0, 1.0]);
    }

    #[test]
    fn degenerate_triangle_rejected() {
        assert!(TriangleGeometry::new([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
    }

    #[test]
    fn bubble_normalisation_and_edges() {
        let g = reference();
        assert!((bubble_eval([1.0 / 3.0; 3], &g).0 - 1.0).abs() < 1e-14);
        assert_eq!(bubble_eval([0.5, 0.5, 0.0], &g).0, 0.0);
        assert_eq!(bubble_eval([0.0, 0.3, 0.7], &g).0, 0.0);
        // gradient vanishes at the peak
        let (_, grad) = bubble_eval([1.0 / 3.0; 3], &g);
        assert!(grad[0].abs() < 1e-14 && grad[1].abs() < 1e-14);
    }

    #[test]
    fn bubble_gradient_matches_finite_differences() {
        let g = TriangleGeometry::new([[0.1, 0.2], [1.3, 0.1], [0.4, 0.9]]).unwrap();
        let value_at = |x: [f64; 2]| {
            // barycentric coordinates from the affine map
            let l1 = g.grads[0][0] * (x[0] - g.coords[1][0]) + g.grads[0][1] * (x[1] - g.coords[1][1]);
            let l2 = g.grads[1][0] * (x[0] - g.coords[2][0]) + g.grads[1][1] * (x[1] - g.coords[2][1]);
            27.0 * l1 * l2 * (1.0 - l1 - l2)
        };
        let bary = [0.2, 0.5, 0.3];
        let x = g.point(bary);
        let (v, grad) = bubble_eval(bary, &g);
        assert!((value_at(x) - v).abs() < 1e-13);
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (value_at(xp) - value_at(xm)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7, "{fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn rule_shapes() {
        let r1 = quadrature(1).unwrap();
        assert_eq!(r1.len(), 1);
        assert_eq!(r1.weights[0], 0.5);
        let r2 = quadrature(2).unwrap();
        assert_eq!(r2.len(), 3);
        assert!((r2.weights.iter().sum::<f64>() - 0.5).abs() < 1e-15);
        assert!(quadrature(0).is_err());
        assert!(quadrature(7).is_err());
    }

    #[test]
    fn rules_are_exact_to_their_degree() {
        for deg in 1..=6 {
            let rule = quadrature(deg).unwrap();
            assert!(rule.weights.iter().all(|&w| w > 0.0));
            assert!((rule.weights.iter().sum::<f64>() - 0.5).abs() < 1e-15);
            for a in 0..=deg as u32 {
                for b in 0..=(deg as u32 - a) {
                    for c in 0..=(deg as u32 - a - b) {
                        let q = integrate(&rule, a, b, c);
                        let exact = monomial(a, b, c);
                        assert!((q - exact).abs() < 1e-15, "deg {deg}: ({a},{b},{c}) {q} vs {exact}");
                    }
                }
            }
        }
    }

    #[test]
    fn degree_six_squared_bubble() {
        let rule = quadrature(6).unwrap();
        let exact = monomial(2, 2, 2);
        assert!((integrate(&rule, 2, 2, 2) - exact).abs() < 1e-16);
        assert!((exact - 8.0 / 40320.0).abs() < 1e-18);
    }

    #[test]
    fn bubble_integral() {
        let g = reference();
        let rule = quadrature(3).unwrap();
        let q: f64 = rule.scaled(g.area).map(|(p, w)| w * bubble_eval(p, &g).0).sum();
        assert!((q - 27.0 * monomial(1, 1, 1)).abs() < 1e-15);
        assert!((q - 27.0 / 120.0).abs() < 1e-15);
    }

    #[test]
    fn gauss_line_exactness() {
        for n in 1..=3 {
            let rule = gauss_line(n).unwrap();
            for p in 0..(2 * n) {
                let q: f64 = rule.iter().map(|(x, w)| w * x.powi(p as i32)).sum();
                assert!((q - 1.0 / (p as f64 + 1.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dof_map_blocks() {
        let (d, _, _) = crate::mesh::build_bilayer(
            crate::mesh::Rect::new(0.0, 1.0, 0.0, 1.0),
            crate::mesh::Rect::new(0.0, 1.0, 1.0, 1.4),
            3,
            3,
            2,
        )
        .unwrap();
        let map = DofMap::new(&d, 2);
        assert_eq!(map.species_len(), 2 * 16);
        assert_eq!(map.displacement_len(), 2 * (16 + 18));
        assert_eq!(map.pressure(0), map.displacement_len());
        assert_eq!(map.elasticity_len(), 2 * 34 + 16);
        let mut seen = vec![false; map.displacement_len()];
        for (t, tri) in d.triangles().iter().enumerate() {
            for (g, _, _) in map.local_disp(*tri, t) {
                seen[g] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    proptest! {
        #[test]
        fn partition_of_unity(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (l1, l2) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
            let g = TriangleGeometry::new([[0.0, 0.0], [2.0, 0.5], [0.3, 1.7]]).unwrap();
            let (v, grads) = p1_eval([l1, l2, 1.0 - l1 - l2], &g);
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let s = [grads[0][0] + grads[1][0] + grads[2][0], grads[0][1] + grads[1][1] + grads[2][1]];
            prop_assert!(s[0].abs() < 1e-13 && s[1].abs() < 1e-13);
        }
    }
}
