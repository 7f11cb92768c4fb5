#pragma once

// Single include point for cpp-httplib. glibc's resolv.h (dragged in by
// httplib) defines `_res` as a macro, which mangles Eigen's kernel parameter
// names if Eigen headers are parsed afterwards, so it is undefined here.
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#ifdef _res
#undef _res
#endif
