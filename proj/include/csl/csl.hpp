#pragma once

#include "csl/aggregate.hpp"
#include "csl/conformal.hpp"
#include "csl/csv_io.hpp"
#include "csl/dataset.hpp"
#include "csl/ensemble.hpp"
#include "csl/error.hpp"
#include "csl/harness.hpp"
#include "csl/learners.hpp"
#include "csl/report.hpp"
#include "csl/rng.hpp"
#include "csl/simgen.hpp"
