// Expected diagnostic: a parse error with no error code.
pub fn broken( {
    let = ;
}
