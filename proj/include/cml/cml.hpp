#pragma once

#include "cml/bvdiag.hpp"
#include "cml/ensemble.hpp"
#include "cml/error.hpp"
#include "cml/lattice.hpp"
#include "cml/observable.hpp"
#include "cml/parallel.hpp"
#include "cml/rng.hpp"
#include "cml/sitemap.hpp"
#include "cml/sparse.hpp"
#include "cml/spectral.hpp"
#include "cml/stats.hpp"
