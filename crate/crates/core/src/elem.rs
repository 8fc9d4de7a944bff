//! Element-level semantics shared by every execution path: the pointwise
//! operation set, its typing rules, reduction operators, and lane-wise
//! kernels over typed vectors.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dtype::{DType, Scalar};
use crate::tensor::{Element, TensorData};

/// Pointwise operation codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ElemCode {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Maximum,
    Minimum,
    Erf,
    Abs,
    CmpLt,
    CmpGt,
    /// `select(cond, on_true, on_false)`.
    Select,
    /// A rank-0 constant splatted into the kernel body.
    Const(Scalar),
}

impl ElemCode {
    pub fn arity(&self) -> usize {
        use ElemCode::*;
        match self {
            Const(_) => 0,
            Neg | Exp | Log | Sqrt | Abs | Erf => 1,
            Add | Sub | Mul | Div | Maximum | Minimum | CmpLt | CmpGt => 2,
            Select => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        use ElemCode::*;
        match self {
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Neg => "neg",
            Exp => "exp",
            Log => "log",
            Sqrt => "sqrt",
            Maximum => "maximum",
            Minimum => "minimum",
            Erf => "erf",
            Abs => "abs",
            CmpLt => "cmp_lt",
            CmpGt => "cmp_gt",
            Select => "select",
            Const(_) => "const",
        }
    }

    /// Dtypes the operands are converted to before the operation runs.
    pub fn operand_dtypes(&self, inputs: &[DType]) -> Vec<DType> {
        use ElemCode::*;
        let joined = inputs.iter().copied().reduce(DType::promote);
        match self {
            Const(_) => Vec::new(),
            Add | Sub | Mul | Maximum | Minimum | Neg | Abs => {
                vec![joined.unwrap().arith(); inputs.len()]
            }
            Div | Exp | Log | Sqrt | Erf => vec![joined.unwrap().floating(); inputs.len()],
            CmpLt | CmpGt => vec![joined.unwrap(); inputs.len()],
            Select => {
                let value = inputs[1].promote(inputs[2]);
                vec![DType::Bool, value, value]
            }
        }
    }

    pub fn result_dtype(&self, inputs: &[DType]) -> DType {
        match self {
            ElemCode::Const(s) => s.dtype(),
            ElemCode::CmpLt | ElemCode::CmpGt => DType::Bool,
            ElemCode::Select => inputs[1].promote(inputs[2]),
            _ => self.operand_dtypes(inputs)[0],
        }
    }
}

impl fmt::Display for ElemCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElemCode::Const(v) => write!(f, "const({v})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Associative, commutative combine operators for reductions and scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceOp {
    Sum,
    Prod,
    Max,
    Min,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Prod => "prod",
            ReduceOp::Max => "max",
            ReduceOp::Min => "min",
        }
    }

    /// Accumulator dtype; booleans accumulate as `i64`.
    pub fn result_dtype(self, input: DType) -> DType {
        if input == DType::Bool {
            DType::I64
        } else {
            input
        }
    }

    /// Dtype of the running value when folding elements of `dtype`.
    pub fn accumulator(dtype: DType) -> DType {
        match dtype {
            DType::F32 => DType::F64,
            d => d,
        }
    }

    pub fn identity(self, dtype: DType) -> Scalar {
        match dtype {
            DType::Bool => Scalar::Bool(matches!(self, ReduceOp::Prod | ReduceOp::Min)),
            DType::I32 => Scalar::I32(<i32 as Arith>::identity(self)),
            DType::I64 => Scalar::I64(<i64 as Arith>::identity(self)),
            DType::F32 => Scalar::F32(<f32 as Arith>::identity(self)),
            DType::F64 => Scalar::F64(<f64 as Arith>::identity(self)),
        }
    }

    /// Combines two scalars of the same (non-bool) dtype.
    pub fn combine(self, a: Scalar, b: Scalar) -> Scalar {
        match (a, b) {
            (Scalar::I32(x), Scalar::I32(y)) => Scalar::I32(x.combine(self, y)),
            (Scalar::I64(x), Scalar::I64(y)) => Scalar::I64(x.combine(self, y)),
            (Scalar::F32(x), Scalar::F32(y)) => Scalar::F32(x.combine(self, y)),
            (Scalar::F64(x), Scalar::F64(y)) => Scalar::F64(x.combine(self, y)),
            (a, b) => panic!("combine over mismatched or boolean operands {a:?}, {b:?}"),
        }
    }
}

impl fmt::Display for ReduceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `as`-style conversions between element types.
pub trait Prim: Element {
    fn from_bool(v: bool) -> Self;
    fn from_i32(v: i32) -> Self;
    fn from_i64(v: i64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn conv<U: Prim>(self) -> U;
}

macro_rules! impl_prim_num {
    ($t:ty, $from:ident) => {
        impl Prim for $t {
            fn from_bool(v: bool) -> Self {
                v as i32 as $t
            }
            fn from_i32(v: i32) -> Self {
                v as $t
            }
            fn from_i64(v: i64) -> Self {
                v as $t
            }
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn conv<U: Prim>(self) -> U {
                U::$from(self)
            }
        }
    };
}

impl_prim_num!(i32, from_i32);
impl_prim_num!(i64, from_i64);
impl_prim_num!(f32, from_f32);
impl_prim_num!(f64, from_f64);

impl Prim for bool {
    fn from_bool(v: bool) -> Self {
        v
    }
    fn from_i32(v: i32) -> Self {
        v != 0
    }
    fn from_i64(v: i64) -> Self {
        v != 0
    }
    fn from_f32(v: f32) -> Self {
        v != 0.0
    }
    fn from_f64(v: f64) -> Self {
        v != 0.0
    }
    fn conv<U: Prim>(self) -> U {
        U::from_bool(self)
    }
}

/// Arithmetic over numeric element types. Integer arithmetic wraps.
pub trait Arith: Prim + PartialOrd {
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn neg(self) -> Self;
    fn abs(self) -> Self;
    fn max_prop(self, o: Self) -> Self;
    fn min_prop(self, o: Self) -> Self;
    fn identity(op: ReduceOp) -> Self;

    /// Running value type for folds and scans. f32 accumulates in f64 so
    /// that the result barely depends on how the work was split.
    type Acc: Arith;
    fn widen(self) -> Self::Acc;
    fn narrow(acc: Self::Acc) -> Self;

    fn combine(self, op: ReduceOp, o: Self) -> Self {
        match op {
            ReduceOp::Sum => self.add(o),
            ReduceOp::Prod => self.mul(o),
            ReduceOp::Max => self.max_prop(o),
            ReduceOp::Min => self.min_prop(o),
        }
    }
}

macro_rules! impl_arith_int {
    ($t:ty) => {
        impl Arith for $t {
            fn add(self, o: Self) -> Self {
                self.wrapping_add(o)
            }
            fn sub(self, o: Self) -> Self {
                self.wrapping_sub(o)
            }
            fn mul(self, o: Self) -> Self {
                self.wrapping_mul(o)
            }
            fn neg(self) -> Self {
                self.wrapping_neg()
            }
            fn abs(self) -> Self {
                self.wrapping_abs()
            }
            fn max_prop(self, o: Self) -> Self {
                Ord::max(self, o)
            }
            fn min_prop(self, o: Self) -> Self {
                Ord::min(self, o)
            }
            fn identity(op: ReduceOp) -> Self {
                match op {
                    ReduceOp::Sum => 0,
                    ReduceOp::Prod => 1,
                    ReduceOp::Max => <$t>::MIN,
                    ReduceOp::Min => <$t>::MAX,
                }
            }
            type Acc = $t;
            fn widen(self) -> $t {
                self
            }
            fn narrow(acc: $t) -> Self {
                acc
            }
        }
    };
}

impl_arith_int!(i32);
impl_arith_int!(i64);

/// Floating-point element types.
pub trait Float: Arith {
    fn div(self, o: Self) -> Self;
    fn exp(self) -> Self;
    fn log(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
}

// max/min propagate NaN and order -0.0 below +0.0 so that both stay
// commutative and associative on every input.
macro_rules! impl_float {
    ($t:ty, $acc:ty, $erf:path) => {
        impl Arith for $t {
            fn add(self, o: Self) -> Self {
                self + o
            }
            fn sub(self, o: Self) -> Self {
                self - o
            }
            fn mul(self, o: Self) -> Self {
                self * o
            }
            fn neg(self) -> Self {
                -self
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn max_prop(self, o: Self) -> Self {
                if self.is_nan() {
                    self
                } else if o.is_nan() {
                    o
                } else if self > o {
                    self
                } else if o > self {
                    o
                } else if self.is_sign_positive() {
                    self
                } else {
                    o
                }
            }
            fn min_prop(self, o: Self) -> Self {
                if self.is_nan() {
                    self
                } else if o.is_nan() {
                    o
                } else if self < o {
                    self
                } else if o < self {
                    o
                } else if self.is_sign_negative() {
                    self
                } else {
                    o
                }
            }
            fn identity(op: ReduceOp) -> Self {
                match op {
                    ReduceOp::Sum => 0.0,
                    ReduceOp::Prod => 1.0,
                    ReduceOp::Max => <$t>::NEG_INFINITY,
                    ReduceOp::Min => <$t>::INFINITY,
                }
            }
            type Acc = $acc;
            fn widen(self) -> $acc {
                self as $acc
            }
            fn narrow(acc: $acc) -> Self {
                acc as $t
            }
        }

        impl Float for $t {
            fn div(self, o: Self) -> Self {
                self / o
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn log(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

impl_float!(f32, f64, libm::erff);
impl_float!(f64, f64, libm::erf);

fn arith_scalar_unary<T: Arith + Float>(code: ElemCode, x: T) -> T {
    match code {
        ElemCode::Neg => x.neg(),
        ElemCode::Abs => x.abs(),
        ElemCode::Exp => Float::exp(x),
        ElemCode::Log => Float::log(x),
        ElemCode::Sqrt => Float::sqrt(x),
        ElemCode::Erf => Float::erf(x),
        _ => unreachable!("{code} is not unary"),
    }
}

fn int_scalar_unary<T: Arith>(code: ElemCode, x: T) -> T {
    match code {
        ElemCode::Neg => x.neg(),
        ElemCode::Abs => x.abs(),
        _ => unreachable!("{code} has no integer form"),
    }
}

fn arith_scalar_binary<T: Arith>(code: ElemCode, a: T, b: T) -> Scalar {
    match code {
        ElemCode::Add => a.add(b).to_scalar(),
        ElemCode::Sub => a.sub(b).to_scalar(),
        ElemCode::Mul => a.mul(b).to_scalar(),
        ElemCode::Maximum => a.max_prop(b).to_scalar(),
        ElemCode::Minimum => a.min_prop(b).to_scalar(),
        ElemCode::CmpLt => Scalar::Bool(a < b),
        ElemCode::CmpGt => Scalar::Bool(a > b),
        _ => unreachable!("{code} has no form for {:?}", T::DTYPE),
    }
}

/// Evaluates `code` on scalar arguments of any dtype, applying the operand
/// conversions from [`ElemCode::operand_dtypes`] first.
pub fn eval_scalar(code: ElemCode, args: &[Scalar]) -> Scalar {
    assert_eq!(args.len(), code.arity(), "arity mismatch for {code}");
    if let ElemCode::Const(v) = code {
        return v;
    }
    let dtypes: Vec<DType> = args.iter().map(|a| a.dtype()).collect();
    let targets = code.operand_dtypes(&dtypes);
    let args: Vec<Scalar> = args.iter().zip(&targets).map(|(a, &t)| a.cast(t)).collect();
    match (code, args.as_slice()) {
        (ElemCode::Select, [c, a, b]) => {
            if c.truthy() {
                *a
            } else {
                *b
            }
        }
        (_, [x]) => match *x {
            Scalar::I32(v) => Scalar::I32(int_scalar_unary(code, v)),
            Scalar::I64(v) => Scalar::I64(int_scalar_unary(code, v)),
            Scalar::F32(v) => Scalar::F32(arith_scalar_unary(code, v)),
            Scalar::F64(v) => Scalar::F64(arith_scalar_unary(code, v)),
            Scalar::Bool(_) => unreachable!("unary {code} over bool"),
        },
        (ElemCode::Div, [Scalar::F32(a), Scalar::F32(b)]) => Scalar::F32(a / b),
        (ElemCode::Div, [Scalar::F64(a), Scalar::F64(b)]) => Scalar::F64(a / b),
        (_, [a, b]) => match (*a, *b) {
            (Scalar::I32(a), Scalar::I32(b)) => arith_scalar_binary(code, a, b),
            (Scalar::I64(a), Scalar::I64(b)) => arith_scalar_binary(code, a, b),
            (Scalar::F32(a), Scalar::F32(b)) => arith_scalar_binary(code, a, b),
            (Scalar::F64(a), Scalar::F64(b)) => arith_scalar_binary(code, a, b),
            (Scalar::Bool(a), Scalar::Bool(b)) => match code {
                ElemCode::CmpLt => Scalar::Bool(!a & b),
                ElemCode::CmpGt => Scalar::Bool(a & !b),
                _ => unreachable!("{code} over bool"),
            },
            _ => unreachable!("mismatched operands after promotion"),
        },
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Lane kernels. Operands must already carry their operand dtypes; `dst` is
// reshaped to the right variant and length.

fn map1<T: Element, U: Element>(a: &[T], dst: &mut TensorData, f: impl Fn(T) -> U) {
    let out = U::vec_mut(dst, a.len());
    for (o, &x) in out.iter_mut().zip(a) {
        *o = f(x);
    }
}

fn map2<T: Element, U: Element>(a: &[T], b: &[T], dst: &mut TensorData, f: impl Fn(T, T) -> U) {
    debug_assert_eq!(a.len(), b.len());
    let out = U::vec_mut(dst, a.len());
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = f(x, y);
    }
}

pub fn cast_into(src: &TensorData, dst: &mut TensorData) {
    fn go<S: Prim>(src: &[S], dst: &mut TensorData) {
        match dst.dtype() {
            DType::Bool => map1(src, dst, |x| x.conv::<bool>()),
            DType::I32 => map1(src, dst, |x| x.conv::<i32>()),
            DType::I64 => map1(src, dst, |x| x.conv::<i64>()),
            DType::F32 => map1(src, dst, |x| x.conv::<f32>()),
            DType::F64 => map1(src, dst, |x| x.conv::<f64>()),
        }
    }
    crate::with_data!(src, v => go(v, dst))
}

/// Converts `src` into `to`, writing into `dst`.
pub fn cast_lanes(src: &TensorData, to: DType, dst: &mut TensorData) {
    if dst.dtype() != to {
        *dst = TensorData::zeros(to, 0);
    }
    cast_into(src, dst);
}

pub fn unary_into(code: ElemCode, a: &TensorData, dst: &mut TensorData) {
    fn float<T: Float>(code: ElemCode, a: &[T], dst: &mut TensorData) {
        match code {
            ElemCode::Neg => map1(a, dst, T::neg),
            ElemCode::Abs => map1(a, dst, T::abs),
            ElemCode::Exp => map1(a, dst, T::exp),
            ElemCode::Log => map1(a, dst, T::log),
            ElemCode::Sqrt => map1(a, dst, T::sqrt),
            ElemCode::Erf => map1(a, dst, T::erf),
            _ => unreachable!("{code} is not unary"),
        }
    }
    fn int<T: Arith>(code: ElemCode, a: &[T], dst: &mut TensorData) {
        match code {
            ElemCode::Neg => map1(a, dst, T::neg),
            ElemCode::Abs => map1(a, dst, T::abs),
            _ => unreachable!("{code} has no integer form"),
        }
    }
    match a {
        TensorData::F32(v) => float(code, v, dst),
        TensorData::F64(v) => float(code, v, dst),
        TensorData::I32(v) => int(code, v, dst),
        TensorData::I64(v) => int(code, v, dst),
        TensorData::Bool(_) => unreachable!("unary {code} over bool lanes"),
    }
}

pub fn binary_into(code: ElemCode, a: &TensorData, b: &TensorData, dst: &mut TensorData) {
    fn arith<T: Arith>(code: ElemCode, a: &[T], b: &[T], dst: &mut TensorData) {
        match code {
            ElemCode::Add => map2(a, b, dst, T::add),
            ElemCode::Sub => map2(a, b, dst, T::sub),
            ElemCode::Mul => map2(a, b, dst, T::mul),
            ElemCode::Maximum => map2(a, b, dst, T::max_prop),
            ElemCode::Minimum => map2(a, b, dst, T::min_prop),
            ElemCode::CmpLt => map2(a, b, dst, |x, y| x < y),
            ElemCode::CmpGt => map2(a, b, dst, |x, y| x > y),
            _ => unreachable!("{code} has no form for {:?}", T::DTYPE),
        }
    }
    use TensorData::*;
    match (a, b) {
        (F32(a), F32(b)) if code == ElemCode::Div => map2(a, b, dst, |x, y| x / y),
        (F64(a), F64(b)) if code == ElemCode::Div => map2(a, b, dst, |x, y| x / y),
        (I32(a), I32(b)) => arith(code, a, b, dst),
        (I64(a), I64(b)) => arith(code, a, b, dst),
        (F32(a), F32(b)) => arith(code, a, b, dst),
        (F64(a), F64(b)) => arith(code, a, b, dst),
        (Bool(a), Bool(b)) => match code {
            ElemCode::CmpLt => map2(a, b, dst, |x, y| !x & y),
            ElemCode::CmpGt => map2(a, b, dst, |x, y| x & !y),
            _ => unreachable!("{code} over bool lanes"),
        },
        _ => unreachable!("mismatched lane dtypes {:?} {:?}", a.dtype(), b.dtype()),
    }
}

pub fn select_into(cond: &TensorData, a: &TensorData, b: &TensorData, dst: &mut TensorData) {
    fn go<T: Element>(c: &[bool], a: &[T], b: &[T], dst: &mut TensorData) {
        let out = T::vec_mut(dst, c.len());
        for (((o, &c), &x), &y) in out.iter_mut().zip(c).zip(a).zip(b) {
            *o = if c { x } else { y };
        }
    }
    let TensorData::Bool(c) = cond else {
        unreachable!("select condition must be bool lanes")
    };
    use TensorData::*;
    match (a, b) {
        (Bool(a), Bool(b)) => go(c, a, b, dst),
        (I32(a), I32(b)) => go(c, a, b, dst),
        (I64(a), I64(b)) => go(c, a, b, dst),
        (F32(a), F32(b)) => go(c, a, b, dst),
        (F64(a), F64(b)) => go(c, a, b, dst),
        _ => unreachable!("mismatched select lanes"),
    }
}

/// In-place inclusive scan of `data[range]` from the identity, carried in
/// the accumulator type.
pub fn scan_in_place(op: ReduceOp, data: &mut TensorData, range: std::ops::Range<usize>) {
    fn go<T: Arith>(op: ReduceOp, v: &mut [T]) {
        let mut acc = T::Acc::identity(op);
        for x in v {
            acc = acc.combine(op, x.widen());
            *x = T::narrow(acc);
        }
    }
    match data {
        TensorData::I32(v) => go(op, &mut v[range]),
        TensorData::I64(v) => go(op, &mut v[range]),
        TensorData::F32(v) => go(op, &mut v[range]),
        TensorData::F64(v) => go(op, &mut v[range]),
        TensorData::Bool(_) => unreachable!("scans accumulate in a numeric dtype"),
    }
}
