/// Declares an API trait and a matching list of its method names, so the
/// exported surface can be inventoried from the same source as the trait.
macro_rules! entry_points {
    (
        $(#[$tm:meta])*
        pub trait $name:ident, names = $names:ident {
            $(
                $(#[$fm:meta])*
                fn $f:ident(&mut self $(, $a:ident: $t:ty)* $(,)?) -> $r:ty;
            )*
        }
    ) => {
        $(#[$tm])*
        pub trait $name {
            $(
                $(#[$fm])*
                fn $f(&mut self $(, $a: $t)*) -> $r;
            )*
        }

        pub const $names: &[&str] = &[$(stringify!($f)),*];
    };
}
