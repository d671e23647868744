#pragma once

// Element type of every tensor. Defining HATSTORY_EXTENDED_PRECISION before the
// first include switches it to long double (used to push the finite-difference
// noise floor of gradient checks below the checked tolerance). The inline
// namespace keeps both variants linkable into one program.
#ifdef HATSTORY_EXTENDED_PRECISION
#define HATSTORY_ABI extended
#else
#define HATSTORY_ABI standard
#endif

#define HATSTORY_BEGIN \
  namespace hatstory {  \
  inline namespace HATSTORY_ABI {
#define HATSTORY_END \
  }                  \
  }

HATSTORY_BEGIN

#ifdef HATSTORY_EXTENDED_PRECISION
using Real = long double;
#else
using Real = double;
#endif

HATSTORY_END
