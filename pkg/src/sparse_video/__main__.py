from sparse_video.cli import main

raise SystemExit(main())
