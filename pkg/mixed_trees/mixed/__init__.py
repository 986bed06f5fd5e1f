"""Mixed-effects estimators: linear mixed models, RE-EM trees and MERF."""
